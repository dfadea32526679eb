//! Pixel containers and PNG I/O.
//!
//! Every image in this crate is a stack of `f64` planes with samples in
//! `[0, 1]`. 8-bit files are mapped through `v / 255` on read and
//! `round(v * 255)` (clamped) on write.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, ArrayViewD, Axis};

use crate::error::{Error, Result};

/// Colorspace tag carried by an [`ImageStack`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colorspace {
    Rgb,
    Ycbcr,
}

/// A single H×W plane of samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    data: Array2<f64>,
}

impl ImagePlane {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid("image plane must be at least 1x1"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image plane".into()));
        }
        Ok(Self { data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array2::from_elem((height, width), value),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Self {
            data: Array2::from_shape_fn((height, width), |(y, x)| f(y, x)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Clamp every sample into `[0, 1]` in place.
    pub fn clamp01(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.mapv(|v| f(v)),
        }
    }
}

/// A C-plane image with a colorspace tag; all planes share dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    planes: Vec<ImagePlane>,
    colorspace: Colorspace,
}

impl ImageStack {
    pub fn new(planes: Vec<ImagePlane>, colorspace: Colorspace) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::invalid("image stack needs at least one plane"));
        }
        let (h, w) = (planes[0].height(), planes[0].width());
        for p in &planes {
            if p.height() != h || p.width() != w {
                return Err(Error::invalid(format!(
                    "plane dims differ: {}x{} vs {}x{}",
                    p.height(),
                    p.width(),
                    h,
                    w
                )));
            }
        }
        Ok(Self { planes, colorspace })
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            planes: (0..channels)
                .map(|_| ImagePlane::constant(height, width, value))
                .collect(),
            colorspace: Colorspace::Rgb,
        }
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    pub fn height(&self) -> usize {
        self.planes[0].height()
    }

    pub fn width(&self) -> usize {
        self.planes[0].width()
    }

    pub fn colorspace(&self) -> Colorspace {
        self.colorspace
    }

    pub fn planes(&self) -> &[ImagePlane] {
        &self.planes
    }

    pub fn plane(&self, c: usize) -> &ImagePlane {
        &self.planes[c]
    }

    pub fn planes_mut(&mut self) -> &mut [ImagePlane] {
        &mut self.planes
    }

    pub fn into_planes(self) -> Vec<ImagePlane> {
        self.planes
    }

    pub fn with_colorspace(mut self, colorspace: Colorspace) -> Self {
        self.colorspace = colorspace;
        self
    }

    pub fn clamp01(&mut self) {
        for p in &mut self.planes {
            p.clamp01();
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> Self {
        Self {
            planes: self.planes.iter().map(|p| p.map(f)).collect(),
            colorspace: self.colorspace,
        }
    }

    /// Pack into a C×H×W array.
    pub fn to_chw(&self) -> Array3<f64> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let mut out = Array3::zeros((c, h, w));
        for (i, p) in self.planes.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(p.data());
        }
        out
    }

    /// Rebuild from a C×H×W array.
    pub fn from_chw(chw: ArrayViewD<'_, f64>, colorspace: Colorspace) -> Result<Self> {
        if chw.ndim() != 3 {
            return Err(Error::invalid("expected a 3-d C,H,W array"));
        }
        let planes = chw
            .axis_iter(Axis(0))
            .map(|p| {
                ImagePlane::new(
                    p.to_owned()
                        .into_dimensionality()
                        .expect("2-d plane slice"),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        ImageStack::new(planes, colorspace)
    }

    /// Crop to the rectangle starting at (`y0`, `x0`) of size `h`×`w`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.height() || x0 + w > self.width() {
            return Err(Error::invalid(format!(
                "crop {}x{}+{}+{} exceeds image {}x{}",
                h,
                w,
                y0,
                x0,
                self.height(),
                self.width()
            )));
        }
        let planes = self
            .planes
            .iter()
            .map(|p| ImagePlane {
                data: p.data().slice(ndarray::s![y0..y0 + h, x0..x0 + w]).to_owned(),
            })
            .collect();
        Ok(Self {
            planes,
            colorspace: self.colorspace,
        })
    }
}

/// Stack a batch of equal-sized C×H×W images into N×C×H×W.
pub fn stack_batch(images: &[ImageStack]) -> Result<ArrayD<f64>> {
    if images.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (c, h, w) = (images[0].channels(), images[0].height(), images[0].width());
    let mut out = ArrayD::zeros(ndarray::IxDyn(&[images.len(), c, h, w]));
    for (n, img) in images.iter().enumerate() {
        if (img.channels(), img.height(), img.width()) != (c, h, w) {
            return Err(Error::invalid("batch images must share dims"));
        }
        out.index_axis_mut(Axis(0), n)
            .assign(&img.to_chw().into_dyn());
    }
    Ok(out)
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Serialize an RGB stack to interleaved 8-bit bytes.
pub fn to_rgb8(stack: &ImageStack) -> Result<Vec<u8>> {
    if stack.channels() != 3 {
        return Err(Error::invalid("to_rgb8 expects 3 planes"));
    }
    let (h, w) = (stack.height(), stack.width());
    let mut bytes = Vec::with_capacity(h * w * 3);
    let (r, g, b) = (
        stack.plane(0).data(),
        stack.plane(1).data(),
        stack.plane(2).data(),
    );
    for y in 0..h {
        for x in 0..w {
            bytes.push(to_u8(r[[y, x]]));
            bytes.push(to_u8(g[[y, x]]));
            bytes.push(to_u8(b[[y, x]]));
        }
    }
    Ok(bytes)
}

/// Deserialize interleaved 8-bit RGB bytes into a stack.
pub fn from_rgb8(bytes: &[u8], height: usize, width: usize) -> Result<ImageStack> {
    if bytes.len() != height * width * 3 {
        return Err(Error::invalid("rgb8 byte length mismatch"));
    }
    let mut planes = vec![Array2::zeros((height, width)); 3];
    for y in 0..height {
        for x in 0..width {
            let base = (y * width + x) * 3;
            for c in 0..3 {
                planes[c][[y, x]] = bytes[base + c] as f64 / 255.0;
            }
        }
    }
    ImageStack::new(
        planes.into_iter().map(|d| ImagePlane { data: d }).collect(),
        Colorspace::Rgb,
    )
}

/// Read a PNG as an RGB stack (gray files are expanded to three planes).
pub fn read_png(path: impl AsRef<Path>) -> Result<ImageStack> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    from_rgb8(rgb.as_raw(), rgb.height() as usize, rgb.width() as usize)
}

/// Write an RGB stack as an 8-bit PNG.
pub fn write_png(stack: &ImageStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_rgb8(stack)?;
    image::save_buffer(
        path,
        &bytes,
        stack.width() as u32,
        stack.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))
}

/// Write a single plane as an 8-bit grayscale PNG.
pub fn write_plane_png(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = plane.data().iter().map(|&v| to_u8(v)).collect();
    image::save_buffer(
        path,
        &bytes,
        plane.width() as u32,
        plane.height() as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))
}
