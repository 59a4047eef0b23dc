//! Partial-modality masking and the missing-modality regularization loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::MmrError;
use crate::flexdata::{DenseInput, Modality, ModalityAvailability};
use crate::scalar::Scalar;

/// Embeddings with a smaller norm have no usable direction.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskKind {
    None,
    MaskD,
    MaskIr,
    MaskDIr,
}

impl MaskKind {
    pub fn masks(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (MaskKind::MaskD | MaskKind::MaskDIr, Modality::Depth) | (MaskKind::MaskIr | MaskKind::MaskDIr, Modality::Ir)
        )
    }

    /// Availability left after masking.
    pub fn remaining(self, avail: ModalityAvailability) -> ModalityAvailability {
        ModalityAvailability {
            has_rgb: avail.has_rgb,
            has_depth: avail.has_depth && !self.masks(Modality::Depth),
            has_ir: avail.has_ir && !self.masks(Modality::Ir),
        }
    }
}

/// `kind` is the mask actually applied. A drawn mask that would hide an
/// already absent modality degrades to `None` with `applicable = false`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEvent {
    pub kind: MaskKind,
    pub applicable: bool,
}

impl MaskEvent {
    pub const NONE: Self = Self {
        kind: MaskKind::None,
        applicable: true,
    };

    pub fn fired(&self) -> bool {
        self.kind != MaskKind::None
    }
}

pub fn check_mask_ratio(gamma: f64) -> Result<(), MmrError> {
    if gamma.is_finite() && gamma >= 0.0 && 3.0 * gamma <= 1.0 + 1e-12 {
        Ok(())
    } else {
        Err(MmrError::MaskRatio(gamma))
    }
}

/// One draw `u ~ U(0,1)`: `[0,γ)` masks depth, `[γ,2γ)` IR, `[2γ,3γ)` both.
pub fn sample_mask<R: Rng + ?Sized>(
    avail: ModalityAvailability,
    gamma: f64,
    rng: &mut R,
) -> Result<MaskEvent, MmrError> {
    check_mask_ratio(gamma)?;
    let u: f64 = rng.gen();
    let kind = if u < gamma {
        MaskKind::MaskD
    } else if u < 2.0 * gamma {
        MaskKind::MaskIr
    } else if u < 3.0 * gamma {
        MaskKind::MaskDIr
    } else {
        MaskKind::None
    };
    let applicable = (!kind.masks(Modality::Depth) || avail.has_depth) && (!kind.masks(Modality::Ir) || avail.has_ir);
    Ok(if applicable {
        MaskEvent { kind, applicable }
    } else {
        MaskEvent {
            kind: MaskKind::None,
            applicable: false,
        }
    })
}

pub fn apply_mask(input: &DenseInput, event: MaskEvent) -> DenseInput {
    if !event.fired() {
        return input.clone();
    }
    input.masked(event.kind.remaining(ModalityAvailability::COMPLETE))
}

/// `-cos(a, b)`, or `None` when either vector is numerically zero.
pub fn mmr_loss<T: Scalar>(masked: &[T], complete: &[T]) -> Option<T> {
    let dot = masked.iter().zip(complete).fold(T::zero(), |s, (&x, &y)| s + x * y);
    let na = masked.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
    let nb = complete.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
    if na.to_f64_lossy() < NORM_EPS || nb.to_f64_lossy() < NORM_EPS {
        log::warn!("embedding norm below {NORM_EPS}; regularization term skipped");
        return None;
    }
    let c = -dot / (na * nb);
    Some(c.max(-T::one()).min(T::one()))
}

/// Batch-mean cross-entropy plus `λ` times the mean regularization value.
pub fn total_loss(bce: f64, mmr_values: &[f64], lambda: f64) -> f64 {
    if mmr_values.is_empty() || lambda == 0.0 {
        return bce;
    }
    bce + lambda * mmr_values.iter().sum::<f64>() / mmr_values.len() as f64
}
