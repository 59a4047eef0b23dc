//! Pluggable IR preprocessing.

use std::fmt;
use std::sync::Arc;

use super::sample::{MultimodalSample, Plane};
use crate::error::DataError;

pub type IrHook = Arc<dyn Fn(&Plane) -> Plane + Send + Sync>;

#[derive(Clone, Default)]
pub enum IrPreprocess {
    #[default]
    Passthrough,
    /// User transform; its output is clipped to `[0, 1]`.
    Custom(IrHook),
}

impl fmt::Debug for IrPreprocess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IrPreprocess::Passthrough => f.write_str("Passthrough"),
            IrPreprocess::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl IrPreprocess {
    /// Built-in modes selectable by name.
    pub fn from_name(name: &str) -> Result<Self, DataError> {
        match name {
            "passthrough" | "" => Ok(IrPreprocess::Passthrough),
            "minmax" => Ok(IrPreprocess::Custom(Arc::new(minmax_stretch))),
            other => Err(DataError::UnknownMode(other.to_string())),
        }
    }

    pub fn custom(f: impl Fn(&Plane) -> Plane + Send + Sync + 'static) -> Self {
        IrPreprocess::Custom(Arc::new(f))
    }
}

fn minmax_stretch(p: &Plane) -> Plane {
    let lo = p.data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = p.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut out = p.clone();
    if span > 0.0 {
        for v in &mut out.data {
            *v = (*v - lo) / span;
        }
    }
    out
}

pub fn ir_preprocess(plane: &Plane, mode: &IrPreprocess) -> Result<Plane, DataError> {
    match mode {
        IrPreprocess::Passthrough => Ok(plane.clone()),
        IrPreprocess::Custom(f) => {
            let mut out = f(plane);
            if (out.height, out.width) != (plane.height, plane.width) {
                return Err(DataError::Invalid(format!(
                    "IR hook changed plane size from {}×{} to {}×{}",
                    plane.height, plane.width, out.height, out.width
                )));
            }
            out.clamp_unit();
            Ok(out)
        }
    }
}

/// Applies `mode` to every sample that carries IR.
pub fn preprocess_ir_planes(samples: &mut [MultimodalSample], mode: &IrPreprocess) -> Result<(), DataError> {
    if matches!(mode, IrPreprocess::Passthrough) {
        return Ok(());
    }
    for s in samples {
        if let Some(ir) = &s.ir {
            s.ir = Some(ir_preprocess(ir, mode)?);
        }
    }
    Ok(())
}
