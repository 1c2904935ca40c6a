//! Dense row-major multi-channel float maps.

use crate::error::{QgsError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channels interleaved.
    pub data: Vec<f64>,
}

impl Map {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(QgsError::DimensionMismatch {
                expected: format!("{expected} values ({width}x{height}x{channels})"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    /// One channel as a single-channel map.
    pub fn channel(&self, c: usize) -> Map {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Map {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn same_shape(&self, other: &Map) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Map) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(QgsError::DimensionMismatch {
                expected: format!("{}x{}x{}", self.width, self.height, self.channels),
                actual: format!("{}x{}x{}", other.width, other.height, other.channels),
            })
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().sum::<f64>() / self.data.len() as f64
        }
    }

    /// Luma with Rec. 601 weights; single-channel maps are returned as is.
    pub fn to_gray(&self) -> Map {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(self.channels)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Map {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Map) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major_interleaved() {
        let mut m = Map::new(3, 2, 3);
        m.set(2, 1, 1, 5.0);
        assert_eq!(m.data[(1 * 3 + 2) * 3 + 1], 5.0);
        assert_eq!(m.pixel(5), &[0.0, 5.0, 0.0]);
        assert_eq!(m.channel(1).get(2, 1, 0), 5.0);
    }

    #[test]
    fn shape_checks() {
        assert!(Map::from_data(2, 2, 1, vec![0.0; 3]).is_err());
        let a = Map::new(2, 2, 1);
        assert!(a.check_same_shape(&Map::new(2, 2, 3)).is_err());
        assert!(a.check_same_shape(&Map::new(2, 2, 1)).is_ok());
    }
}
