use super::{reflect_index, ConfidenceMap, LabelMap, ProbMap, Rect, RgbImage};
use crate::error::{Error, Result};

/// Region copy and border extension shared by all raster types.
pub trait Raster: Sized {
    fn height(&self) -> usize;
    fn width(&self) -> usize;

    /// Exact copy of the pixels under `rect`.
    fn crop(&self, rect: Rect) -> Result<Self>;

    /// Overwrites the pixels under `rect` with `src`, whose dims must equal the rect extent.
    fn paste(&mut self, src: &Self, rect: Rect) -> Result<()>;

    /// Extends bottom and right borders by reflection (edge pixel not repeated)
    /// up to `height x width`.
    fn pad_reflect(&self, height: usize, width: usize) -> Result<Self>;
}

// Planar layout: `planes` planes of `h*w` pixels, each pixel `pix` elements wide.
struct Layout {
    planes: usize,
    pix: usize,
    h: usize,
    w: usize,
}

fn check_rect(rect: Rect, h: usize, w: usize) -> Result<()> {
    if !rect.fits_in(h, w) {
        return Err(Error::invalid(format!("rect {rect} does not fit in a {h}x{w} raster")));
    }
    Ok(())
}

fn crop_planar<T: Copy>(data: &[T], l: &Layout, rect: Rect) -> Result<Vec<T>> {
    check_rect(rect, l.h, l.w)?;
    let mut out = Vec::with_capacity(l.planes * rect.area() * l.pix);
    for p in 0..l.planes {
        let base = p * l.h * l.w * l.pix;
        for y in rect.y..rect.bottom() {
            let row = base + (y * l.w + rect.x) * l.pix;
            out.extend_from_slice(&data[row..row + rect.w * l.pix]);
        }
    }
    Ok(out)
}

fn paste_planar<T: Copy>(dst: &mut [T], l: &Layout, src: &[T], rect: Rect) -> Result<()> {
    check_rect(rect, l.h, l.w)?;
    let span = rect.w * l.pix;
    for p in 0..l.planes {
        let base = p * l.h * l.w * l.pix;
        let sbase = p * rect.area() * l.pix;
        for (j, y) in (rect.y..rect.bottom()).enumerate() {
            let row = base + (y * l.w + rect.x) * l.pix;
            dst[row..row + span].copy_from_slice(&src[sbase + j * span..sbase + (j + 1) * span]);
        }
    }
    Ok(())
}

fn pad_planar<T: Copy>(data: &[T], l: &Layout, h: usize, w: usize) -> Result<Vec<T>> {
    if h < l.h || w < l.w {
        return Err(Error::invalid(format!("cannot pad {}x{} down to {h}x{w}", l.h, l.w)));
    }
    let mut out = Vec::with_capacity(l.planes * h * w * l.pix);
    for p in 0..l.planes {
        let base = p * l.h * l.w * l.pix;
        for y in 0..h {
            let sy = reflect_index(y as isize, l.h);
            for x in 0..w {
                let sx = reflect_index(x as isize, l.w);
                let i = base + (sy * l.w + sx) * l.pix;
                out.extend_from_slice(&data[i..i + l.pix]);
            }
        }
    }
    Ok(out)
}

impl Raster for ProbMap {
    fn height(&self) -> usize {
        self.height
    }

    fn width(&self) -> usize {
        self.width
    }

    fn crop(&self, rect: Rect) -> Result<Self> {
        let data = crop_planar(&self.data, &self.layout(), rect)?;
        ProbMap::new(self.channels, rect.h, rect.w, data)
    }

    fn paste(&mut self, src: &Self, rect: Rect) -> Result<()> {
        if src.channels != self.channels || src.dims() != (rect.h, rect.w) {
            return Err(Error::invalid(format!(
                "paste source {}x{}x{} does not match rect {rect} with {} channels",
                src.channels, src.height, src.width, self.channels
            )));
        }
        let l = self.layout();
        paste_planar(&mut self.data, &l, &src.data, rect)
    }

    fn pad_reflect(&self, height: usize, width: usize) -> Result<Self> {
        let data = pad_planar(&self.data, &self.layout(), height, width)?;
        ProbMap::new(self.channels, height, width, data)
    }
}

impl ProbMap {
    fn layout(&self) -> Layout {
        Layout {
            planes: self.channels,
            pix: 1,
            h: self.height,
            w: self.width,
        }
    }
}

impl Raster for RgbImage {
    fn height(&self) -> usize {
        self.height
    }

    fn width(&self) -> usize {
        self.width
    }

    fn crop(&self, rect: Rect) -> Result<Self> {
        let data = crop_planar(&self.data, &self.layout(), rect)?;
        RgbImage::new(rect.h, rect.w, data)
    }

    fn paste(&mut self, src: &Self, rect: Rect) -> Result<()> {
        if src.dims() != (rect.h, rect.w) {
            return Err(Error::invalid(format!(
                "paste source {}x{} does not match rect {rect}",
                src.height, src.width
            )));
        }
        let l = self.layout();
        paste_planar(&mut self.data, &l, &src.data, rect)
    }

    fn pad_reflect(&self, height: usize, width: usize) -> Result<Self> {
        let data = pad_planar(&self.data, &self.layout(), height, width)?;
        RgbImage::new(height, width, data)
    }
}

impl RgbImage {
    fn layout(&self) -> Layout {
        Layout {
            planes: 1,
            pix: 3,
            h: self.height,
            w: self.width,
        }
    }
}

impl Raster for LabelMap {
    fn height(&self) -> usize {
        self.height
    }

    fn width(&self) -> usize {
        self.width
    }

    fn crop(&self, rect: Rect) -> Result<Self> {
        let data = crop_planar(&self.data, &self.layout(), rect)?;
        LabelMap::new(rect.h, rect.w, data)
    }

    fn paste(&mut self, src: &Self, rect: Rect) -> Result<()> {
        if src.dims() != (rect.h, rect.w) {
            return Err(Error::invalid(format!(
                "paste source {}x{} does not match rect {rect}",
                src.height, src.width
            )));
        }
        let l = self.layout();
        paste_planar(&mut self.data, &l, &src.data, rect)
    }

    fn pad_reflect(&self, height: usize, width: usize) -> Result<Self> {
        let data = pad_planar(&self.data, &self.layout(), height, width)?;
        LabelMap::new(height, width, data)
    }
}

impl LabelMap {
    fn layout(&self) -> Layout {
        Layout {
            planes: 1,
            pix: 1,
            h: self.height,
            w: self.width,
        }
    }
}

impl Raster for ConfidenceMap {
    fn height(&self) -> usize {
        self.height
    }

    fn width(&self) -> usize {
        self.width
    }

    fn crop(&self, rect: Rect) -> Result<Self> {
        let data = crop_planar(&self.data, &self.layout(), rect)?;
        ConfidenceMap::new(rect.h, rect.w, data)
    }

    fn paste(&mut self, src: &Self, rect: Rect) -> Result<()> {
        if src.dims() != (rect.h, rect.w) {
            return Err(Error::invalid(format!(
                "paste source {}x{} does not match rect {rect}",
                src.height, src.width
            )));
        }
        let l = self.layout();
        paste_planar(&mut self.data, &l, &src.data, rect)
    }

    fn pad_reflect(&self, height: usize, width: usize) -> Result<Self> {
        let data = pad_planar(&self.data, &self.layout(), height, width)?;
        ConfidenceMap::new(height, width, data)
    }
}

impl ConfidenceMap {
    fn layout(&self) -> Layout {
        Layout {
            planes: 1,
            pix: 1,
            h: self.height,
            w: self.width,
        }
    }
}
