//! Single-band 2-D rasters in row-major order.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Raster {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} values cannot fill a {height}x{width} raster",
                data.len()
            )));
        }
        Ok(Raster { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Raster { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.width + c] = v;
    }

    /// Value at a signed position, or `fill` outside the raster.
    #[inline]
    pub fn get_or(&self, r: isize, c: isize, fill: T) -> T {
        if r < 0 || c < 0 || r as usize >= self.height || c as usize >= self.width {
            fill
        } else {
            self.get(r as usize, c as usize)
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Window of `h×w` at signed top-left `(top, left)`; cells outside are `fill`.
    pub fn window(&self, top: isize, left: isize, h: usize, w: usize, fill: T) -> Raster<T> {
        Raster::from_fn(h, w, |r, c| self.get_or(top + r as isize, left + c as isize, fill))
    }

    /// Quarter turn counter-clockwise, applied `k` times.
    pub fn rot90(&self, k: usize) -> Raster<T> {
        let mut out = self.clone();
        for _ in 0..k % 4 {
            let (h, w) = out.dims();
            out = Raster::from_fn(w, h, |r, c| out.get(c, w - 1 - r));
        }
        out
    }

    /// Mirror left-right.
    pub fn hflip(&self) -> Raster<T> {
        Raster::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    /// Mirror top-bottom.
    pub fn vflip(&self) -> Raster<T> {
        Raster::from_fn(self.height, self.width, |r, c| self.get(self.height - 1 - r, c))
    }

    pub fn transpose(&self) -> Raster<T> {
        Raster::from_fn(self.width, self.height, |r, c| self.get(c, r))
    }
}

impl Raster<f32> {
    /// 2×2 mean pooling; dimensions must be even.
    pub fn mean_pool2(&self) -> Result<Raster<f32>> {
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "mean pooling needs even dimensions, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(Raster::from_fn(self.height / 2, self.width / 2, |r, c| {
            let s = self.get(2 * r, 2 * c)
                + self.get(2 * r, 2 * c + 1)
                + self.get(2 * r + 1, 2 * c)
                + self.get(2 * r + 1, 2 * c + 1);
            s * 0.25
        }))
    }
}

impl<T: Copy> Raster<T> {
    /// Nearest-neighbour subsampling by an integer factor, keeping the
    /// top-left sample of each block.
    pub fn subsample(&self, factor: usize) -> Result<Raster<T>> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::shape(format!(
                "{}x{} is not divisible by {factor}",
                self.height, self.width
            )));
        }
        Ok(Raster::from_fn(self.height / factor, self.width / factor, |r, c| {
            self.get(r * factor, c * factor)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Raster<u32> {
        Raster::from_fn(h, w, |r, c| (r * w + c) as u32)
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let r = ramp(3, 5);
        assert_eq!(r.rot90(4), r);
        assert_eq!(r.rot90(1).dims(), (5, 3));
        assert_eq!(r.rot90(1).rot90(3), r);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let r = ramp(2, 2); // [[0,1],[2,3]]
        assert_eq!(r.rot90(1).as_slice(), &[1, 3, 0, 2]);
    }

    #[test]
    fn flips_are_involutions() {
        let r = ramp(4, 3);
        assert_eq!(r.hflip().hflip(), r);
        assert_eq!(r.vflip().vflip(), r);
        assert_eq!(r.hflip().get(0, 0), 2);
    }

    #[test]
    fn window_pads_outside() {
        let r = ramp(2, 2);
        let w = r.window(-1, -1, 3, 3, 99);
        assert_eq!(w.as_slice(), &[99, 99, 99, 99, 0, 1, 99, 2, 3]);
    }

    #[test]
    fn mean_pool_and_subsample() {
        let r = Raster::from_fn(2, 4, |r, c| (r * 4 + c) as f32);
        assert_eq!(r.mean_pool2().unwrap().as_slice(), &[2.5, 4.5]);
        assert_eq!(ramp(4, 4).subsample(2).unwrap().as_slice(), &[0, 2, 8, 10]);
        assert!(ramp(3, 4).subsample(2).is_err());
    }
}
