use crate::error::{BapError, Result};

pub const MIN_EXTENT: usize = 8;
pub const CHANNELS: usize = 3;

/// Mid-gray used as the canvas for isolated foregrounds.
pub const NEUTRAL_GRAY: f32 = 0.5;

/// `H×W×3` image with values in `[0, 1]`, stored row-major (HWC).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_EXTENT || width < MIN_EXTENT {
            return Err(BapError::dim("Raster::new", format!("{height}x{width} below {MIN_EXTENT}")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(BapError::dim(
                "Raster::new",
                format!("{height}x{width}x3 needs {} values, got {}", height * width * CHANNELS, data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(BapError::degenerate("Raster::new", format!("value {} at {i} outside [0,1]", data[i])));
        }
        Ok(Raster { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Raster { height, width, data: vec![value.clamp(0.0, 1.0); height * width * CHANNELS] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Multiplies every value by `factor` in `[0, 1]`.
    pub fn scaled(&self, factor: f32) -> Raster {
        let f = factor.clamp(0.0, 1.0);
        Raster { height: self.height, width: self.width, data: self.data.iter().map(|v| v * f).collect() }
    }
}

/// Single-channel 8-bit mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGray {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskGray {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(BapError::dim("MaskGray::new", format!("{height}x{width} with {} values", data.len())));
        }
        Ok(MaskGray { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MaskGray { height, width, data: vec![0; height * width] }
    }

    /// Builds a mask from a `0/1`-style predicate over `(y, x)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        MaskGray { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn support(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0).count()
    }

    /// Tight bounding box of non-zero pixels.
    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == 0 {
                    continue;
                }
                b = Some(match b {
                    None => BBox { y0: y, x0: x, y1: y + 1, x1: x + 1 },
                    Some(bb) => BBox {
                        y0: bb.y0.min(y),
                        x0: bb.x0.min(x),
                        y1: bb.y1.max(y + 1),
                        x1: bb.x1.max(x + 1),
                    },
                });
            }
        }
        b
    }

    pub fn crop(&self, b: BBox) -> MaskGray {
        MaskGray::from_fn(b.height(), b.width(), |y, x| self.get(b.y0 + y, b.x0 + x))
    }
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

/// Crops an RGB raster to `b`, returning raw channel data (may be smaller than
/// the raster minimum extent).
pub(crate) fn crop_rgb(r: &Raster, b: BBox) -> Vec<f32> {
    let mut out = Vec::with_capacity(b.height() * b.width() * CHANNELS);
    for y in b.y0..b.y1 {
        let start = (y * r.width + b.x0) * CHANNELS;
        out.extend_from_slice(&r.data[start..start + b.width() * CHANNELS]);
    }
    out
}
