use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved RGB image with channel values on the 0–255 scale.
///
/// Values are `f32` so the corpus mean image is representable exactly enough
/// to serve as a masking fill.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Corpus(format!(
                "raster {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32).collect();
        Self { height: h as usize, width: w as usize, data }
    }

    /// Rounds and clamps to 8 bits.
    /// Reads any supported image file as RGB.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(Self::from_rgb8(&open(path)?.to_rgb8()))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("length checked at construction")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f32; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel-centre coordinates, edges clamped.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> [f32; 3] {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let mut out = [0.0f32; 3];
        for ch in 0..3 {
            let at = |r: usize, c: usize| self.data[(r * self.width + c) * 3 + ch] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out[ch] = (top * (1.0 - fy) + bot * fy) as f32;
        }
        out
    }

    /// Bilinear resize with aligned pixel centres.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Raster::new(height, width);
        for r in 0..height {
            for c in 0..width {
                let y = (r as f64 + 0.5) * sy - 0.5;
                let x = (c as f64 + 0.5) * sx - 0.5;
                out.set_pixel(r, c, self.sample_bilinear(y, x));
            }
        }
        out
    }

    /// Network input `[3, height, width]` with values mapped to `[-1, 1]`.
    pub fn to_tensor<S: Scalar>(&self, height: usize, width: usize) -> Tensor<S> {
        let src = self.resize_bilinear(height, width);
        let plane = height * width;
        let mut data = vec![S::zero(); 3 * plane];
        for p in 0..plane {
            for ch in 0..3 {
                data[ch * plane + p] = S::of((src.data[p * 3 + ch] as f64 - 127.5) / 127.5);
            }
        }
        Tensor::from_vec(&[3, height, width], data).expect("dims match data")
    }
}

/// Per-pixel label ids; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

fn open(path: &std::path::Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))
}

impl LabelMap {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Corpus(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_luma8(img: &image::GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self { height: h as usize, width: w as usize, data: img.as_raw().clone() }
    }

    /// Reads an 8-bit grayscale PNG whose pixel values are label ids.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        match open(path)? {
            image::DynamicImage::ImageLuma8(img) => Ok(Self::from_luma8(&img)),
            other => Err(Error::Corpus(format!("{}: label maps must be 8-bit grayscale, got {:?}", path.display(), other.color()))),
        }
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("length checked at construction")
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

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.width + c] = v;
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// Nearest-neighbour resize (label ids must not blend).
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = LabelMap::new(height, width);
        for r in 0..height {
            let sr = ((r as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for c in 0..width {
                let sc = ((c as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                out.set(r, c, self.get(sr.min(self.height - 1), sc.min(self.width - 1)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_scaling_maps_extremes() {
        let mut r = Raster::new(2, 2);
        r.set_pixel(0, 0, [255.0, 0.0, 127.5]);
        let t = r.to_tensor::<f64>(2, 2);
        assert_eq!(t.dims(), &[3, 2, 2]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[4], -1.0);
        assert_eq!(t.data()[8], 0.0);
    }

    #[test]
    fn halving_constant_raster_is_constant() {
        let r = Raster::filled(8, 8, [10.0, 20.0, 30.0]);
        let h = r.resize_bilinear(4, 4);
        assert!(h.data().chunks(3).all(|p| p == [10.0, 20.0, 30.0]));
    }

    #[test]
    fn halving_averages_pixel_pairs() {
        let data: Vec<f32> = (0..4).flat_map(|c| [c as f32 * 10.0; 3]).collect();
        let r = Raster::from_data(1, 4, data).unwrap();
        let h = r.resize_bilinear(1, 2);
        assert_eq!(h.pixel(0, 0), [5.0; 3]);
        assert_eq!(h.pixel(0, 1), [25.0; 3]);
    }

    #[test]
    fn nearest_resize_keeps_label_ids() {
        let m = LabelMap::from_data(2, 2, vec![1, 2, 3, 4]).unwrap();
        let up = m.resize_nearest(4, 4);
        assert_eq!(up.get(0, 0), 1);
        assert_eq!(up.get(3, 3), 4);
        assert_eq!(up.resize_nearest(2, 2), m);
    }
}
