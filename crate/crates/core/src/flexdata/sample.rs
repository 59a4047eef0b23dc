//! Multimodal samples, availability flags and zero-filling.

use serde::{Deserialize, Serialize};

/// Channel-major image plane with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| (v as f64 - m) * (v as f64 - m))
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
    Ir,
}

impl Modality {
    /// Canonical token/channel order.
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Ir];

    pub fn index(self) -> usize {
        match self {
            Modality::Rgb => 0,
            Modality::Depth => 1,
            Modality::Ir => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Ir => "ir",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Spoof,
    Live,
}

impl Label {
    /// Class index used by the classification head (live = 1).
    pub fn class(self) -> usize {
        match self {
            Label::Spoof => 0,
            Label::Live => 1,
        }
    }

    pub fn from_class(c: u8) -> Option<Self> {
        match c {
            0 => Some(Label::Spoof),
            1 => Some(Label::Live),
            _ => None,
        }
    }

    pub fn is_live(self) -> bool {
        self == Label::Live
    }
}

/// Which modalities a sample carries. RGB is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityAvailability {
    #[serde(rename = "rgb")]
    pub has_rgb: bool,
    #[serde(rename = "depth")]
    pub has_depth: bool,
    #[serde(rename = "ir")]
    pub has_ir: bool,
}

impl ModalityAvailability {
    pub const COMPLETE: Self = Self::new(true, true);
    pub const RGB_D: Self = Self::new(true, false);
    pub const RGB_IR: Self = Self::new(false, true);
    pub const RGB_ONLY: Self = Self::new(false, false);

    pub const fn new(has_depth: bool, has_ir: bool) -> Self {
        Self {
            has_rgb: true,
            has_depth,
            has_ir,
        }
    }

    pub fn has(self, m: Modality) -> bool {
        match m {
            Modality::Rgb => self.has_rgb,
            Modality::Depth => self.has_depth,
            Modality::Ir => self.has_ir,
        }
    }

    pub fn intersect(self, other: Self) -> Self {
        Self {
            has_rgb: self.has_rgb && other.has_rgb,
            has_depth: self.has_depth && other.has_depth,
            has_ir: self.has_ir && other.has_ir,
        }
    }

    pub fn is_complete(self) -> bool {
        self.has_rgb && self.has_depth && self.has_ir
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub id: String,
    pub rgb: Plane,
    pub depth: Option<Plane>,
    pub ir: Option<Plane>,
    pub label: Label,
}

impl MultimodalSample {
    /// Modalities physically present in the sample.
    pub fn availability(&self) -> ModalityAvailability {
        ModalityAvailability::new(self.depth.is_some(), self.ir.is_some())
    }

    pub fn size(&self) -> usize {
        self.rgb.height
    }

    /// Drops the modalities `avail` marks as absent.
    pub fn restricted(&self, avail: ModalityAvailability) -> Self {
        Self {
            id: self.id.clone(),
            rgb: self.rgb.clone(),
            depth: self.depth.clone().filter(|_| avail.has_depth),
            ir: self.ir.clone().filter(|_| avail.has_ir),
            label: self.label,
        }
    }
}

/// Model input: RGB, depth and IR planes, absent modalities zero-filled.
///
/// `present` marks which planes carry data; absent planes contribute zero
/// patch vectors after pixel normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseInput {
    pub planes: [Plane; 3],
    pub present: [bool; 3],
}

impl DenseInput {
    /// All three planes present.
    pub fn complete(planes: [Plane; 3]) -> Self {
        Self {
            planes,
            present: [true; 3],
        }
    }

    pub fn plane(&self, m: Modality) -> &Plane {
        &self.planes[m.index()]
    }

    pub fn is_present(&self, m: Modality) -> bool {
        self.present[m.index()]
    }

    /// Zeroes every plane `avail` marks absent.
    pub fn masked(&self, avail: ModalityAvailability) -> Self {
        let mut out = self.clone();
        for m in Modality::ALL {
            if !avail.has(m) {
                let p = &out.planes[m.index()];
                out.planes[m.index()] = Plane::zeros(p.channels, p.height, p.width);
                out.present[m.index()] = false;
            }
        }
        out
    }
}

/// Dense input where every modality not both present and available is zero.
pub fn zero_fill(sample: &MultimodalSample, avail: ModalityAvailability) -> DenseInput {
    let (h, w) = (sample.rgb.height, sample.rgb.width);
    let pick = |p: &Option<Plane>, on: bool| match p {
        Some(p) if on => p.clone(),
        _ => Plane::zeros(1, h, w),
    };
    DenseInput {
        planes: [
            sample.rgb.clone(),
            pick(&sample.depth, avail.has_depth),
            pick(&sample.ir, avail.has_ir),
        ],
        present: [
            true,
            avail.has_depth && sample.depth.is_some(),
            avail.has_ir && sample.ir.is_some(),
        ],
    }
}
