//! JSON encoding for complex numbers: always `{"re": f64, "im": f64}`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cx {
    pub re: f64,
    pub im: f64,
}

impl From<Cx> for Complex64 {
    fn from(c: Cx) -> Self {
        Complex64::new(c.re, c.im)
    }
}

impl From<Complex64> for Cx {
    fn from(c: Complex64) -> Self {
        Cx { re: c.re, im: c.im }
    }
}

impl Cx {
    pub fn new(re: f64, im: f64) -> Self {
        Cx { re, im }
    }

    pub fn polar(mag: f64, deg: f64) -> Self {
        Complex64::from_polar(mag, deg.to_radians()).into()
    }
}
