use serde::{Deserialize, Serialize};

use crate::geometry::{ref_distance_from_aods, AngleTriplet};

/// Uniform scalar quantizer per angle. `bits = None` means no quantization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSpec {
    pub bits: Option<u32>,
    /// `[a_i, b_i]` for `omega11`, `omega1M`, `gamma`.
    pub ranges: [(f64, f64); 3],
}

impl QuantizerSpec {
    pub fn new(bits: Option<u32>, ranges: [(f64, f64); 3]) -> crate::Result<Self> {
        if let Some(q) = bits {
            if !(1..=52).contains(&q) {
                return Err(crate::Error::invalid(format!("quantizer bits {q} outside 1..=52")));
            }
        }
        if ranges.iter().any(|(a, b)| !(a < b)) {
            return Err(crate::Error::invalid("quantizer ranges must be increasing"));
        }
        Ok(Self { bits, ranges })
    }

    pub fn levels(&self) -> Option<u64> {
        self.bits.map(|q| 1u64 << q)
    }

    /// Step `(b - a) / (2^q - 1)`; zero without quantization.
    pub fn step(&self, i: usize) -> f64 {
        match self.levels() {
            Some(l) => (self.ranges[i].1 - self.ranges[i].0) / (l - 1) as f64,
            None => 0.0,
        }
    }

    /// Uniform-error variance `step^2 / 12` per angle.
    pub fn error_variance(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.step(i).powi(2) / 12.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeedbackCode {
    Exact(AngleTriplet),
    Levels([u64; 3]),
}

/// What the UE sends back, plus whether any angle had to be clamped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub code: FeedbackCode,
    pub clamped: [bool; 3],
}

pub fn quantize(t: &AngleTriplet, spec: &QuantizerSpec) -> Feedback {
    let x = t.as_array();
    let mut clamped = [false; 3];
    let Some(levels) = spec.levels() else {
        return Feedback { code: FeedbackCode::Exact(*t), clamped };
    };
    let codes = std::array::from_fn(|i| {
        let (a, b) = spec.ranges[i];
        clamped[i] = !(a..=b).contains(&x[i]);
        let idx = ((x[i] - a) / spec.step(i)).round();
        idx.clamp(0.0, (levels - 1) as f64) as u64
    });
    Feedback { code: FeedbackCode::Levels(codes), clamped }
}

/// [`quantize`], except that a code whose outer rays would not meet in front
/// of a BS of aperture `lbs_m` is replaced by the nearest neighbouring code
/// that does. Rounding both AoDs of an end-fire UE to one level is the usual
/// way such a code arises.
pub fn quantize_feasible(t: &AngleTriplet, spec: &QuantizerSpec, lbs_m: f64) -> Feedback {
    let fb = quantize(t, spec);
    let (FeedbackCode::Levels(codes), Some(levels)) = (fb.code, spec.levels()) else {
        return fb;
    };
    let feasible = |c: [u64; 3]| {
        let a = dequantize(&Feedback { code: FeedbackCode::Levels(c), clamped: fb.clamped }, spec);
        matches!(ref_distance_from_aods(a.omega11, a.omega1m, lbs_m), Ok(d) if d > 0.0)
    };
    if feasible(codes) {
        return fb;
    }
    let x = t.as_array();
    let mut candidates: Vec<([u64; 3], f64)> = Vec::new();
    for d0 in -1i64..=1 {
        for d1 in -1i64..=1 {
            let shifted = [codes[0] as i64 + d0, codes[1] as i64 + d1];
            if shifted.iter().any(|&c| c < 0 || c >= levels as i64) {
                continue;
            }
            let c = [shifted[0] as u64, shifted[1] as u64, codes[2]];
            let a = dequantize(&Feedback { code: FeedbackCode::Levels(c), clamped: fb.clamped }, spec).as_array();
            candidates.push((c, (a[0] - x[0]).powi(2) + (a[1] - x[1]).powi(2)));
        }
    }
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1));
    match candidates.into_iter().find(|(c, _)| feasible(*c)) {
        Some((c, _)) => Feedback { code: FeedbackCode::Levels(c), clamped: fb.clamped },
        None => fb,
    }
}

pub fn dequantize(fb: &Feedback, spec: &QuantizerSpec) -> AngleTriplet {
    match fb.code {
        FeedbackCode::Exact(t) => t,
        FeedbackCode::Levels(codes) => {
            let l = (spec.levels().unwrap_or(2) - 1) as f64;
            AngleTriplet::from_array(std::array::from_fn(|i| {
                let (a, b) = spec.ranges[i];
                let c = codes[i] as f64;
                // Same endpoint-exact rule as the grid axes.
                (a * (l - c) + c * b) / l
            }))
        }
    }
}
