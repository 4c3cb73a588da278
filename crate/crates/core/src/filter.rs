//! IIR filter design (Butterworth, notch) as second-order sections, with
//! causal and forward-backward application.

use std::f64::consts::PI;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type C64 = Complex<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandKind {
    LowPass(f64),
    HighPass(f64),
    BandPass(f64, f64),
}

/// Cascade of biquads, each `[b0, b1, b2, a0, a1, a2]` with `a0 == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    sections: Vec<[f64; 6]>,
}

impl Sos {
    pub fn sections(&self) -> &[[f64; 6]] {
        &self.sections
    }

    /// Complex response at `f_hz` for sampling rate `fs`.
    pub fn response(&self, f_hz: f64, fs: f64) -> C64 {
        let w = 2.0 * PI * f_hz / fs;
        let z1 = C64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .fold(C64::new(1.0, 0.0), |acc, s| acc * (s[0] + z1 * s[1] + z2 * s[2]) / (s[3] + z1 * s[4] + z2 * s[5]))
    }

    pub fn gain(&self, f_hz: f64, fs: f64) -> f64 {
        self.response(f_hz, fs).norm()
    }

    /// Largest pole radius over all sections.
    fn max_pole_radius(&self) -> f64 {
        self.sections
            .iter()
            .map(|s| {
                let (a1, a2) = (s[4], s[5]);
                let disc = C64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
                let r1 = ((-a1 + disc) / 2.0).norm();
                let r2 = ((-a1 - disc) / 2.0).norm();
                r1.max(r2)
            })
            .fold(0.0, f64::max)
    }

    /// Edge extension used by [`Sos::filtfilt`]: long enough for the slowest
    /// pole to decay by 60 dB, never shorter than `3 * (2 * sections + 1)`.
    pub fn pad_len(&self, n: usize) -> usize {
        let floor = 3 * (2 * self.sections.len() + 1);
        let r = self.max_pole_radius();
        let decay = if r > 0.0 && r < 1.0 { ((1e-3f64).ln() / r.ln()).ceil() as usize } else { floor };
        decay.max(floor).min(n.saturating_sub(1))
    }

    /// Per-section initial state for a unit step input at steady state.
    fn step_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let (b0, b1, b2, a1, a2) = (s[0], s[1], s[2], s[4], s[5]);
                let g = (b0 + b1 + b2) / (1.0 + a1 + a2);
                let zi = [scale * (g - b0), scale * (b2 - a2 * g)];
                scale *= g;
                zi
            })
            .collect()
    }

    fn run(&self, x: &mut [f64], init: Option<f64>) {
        let zi = init.map(|x0| self.step_state().into_iter().map(|z| [z[0] * x0, z[1] * x0]).collect::<Vec<_>>());
        for (k, s) in self.sections.iter().enumerate() {
            let (b0, b1, b2, a1, a2) = (s[0], s[1], s[2], s[4], s[5]);
            let [mut z0, mut z1] = zi.as_ref().map_or([0.0, 0.0], |z| z[k]);
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z0;
                z0 = b1 * xin - a1 * y + z1;
                z1 = b2 * xin - a2 * y;
                *v = y;
            }
        }
    }

    /// Causal filtering from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.run(&mut y, None);
        y
    }

    /// Causal filtering with the state initialised to the steady state of a
    /// step at `x[0]`.
    pub fn filter_steady(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        if let Some(&x0) = x.first() {
            self.run(&mut y, Some(x0));
        }
        y
    }

    /// Zero-phase forward-backward filtering with odd edge extension.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.pad_len(n);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        let x0 = ext[0];
        self.run(&mut ext, Some(x0));
        ext.reverse();
        let y0 = ext[0];
        self.run(&mut ext, Some(y0));
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

fn check_edge(f: f64, fs: f64) -> Result<()> {
    if !(f > 0.0 && f < fs / 2.0) {
        return Err(Error::arg(format!("edge {f} Hz must lie in (0, {}) Hz", fs / 2.0)));
    }
    Ok(())
}

/// Digital Butterworth filter of prototype order `order` (band-pass designs
/// have `2 * order` poles), via pre-warped bilinear transform.
pub fn butterworth(order: usize, band: BandKind, fs: f64) -> Result<Sos> {
    if order == 0 {
        return Err(Error::arg("filter order must be positive"));
    }
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let proto: Vec<C64> = (0..order)
        .map(|k| {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            C64::from_polar(1.0, theta)
        })
        .collect();

    let (analog_poles, reference_hz): (Vec<C64>, f64) = match band {
        BandKind::LowPass(fc) => {
            check_edge(fc, fs)?;
            let w = warp(fc);
            (proto.iter().map(|p| p * w).collect(), 0.0)
        }
        BandKind::HighPass(fc) => {
            check_edge(fc, fs)?;
            let w = warp(fc);
            (proto.iter().map(|p| w / p).collect(), fs / 2.0)
        }
        BandKind::BandPass(lo, hi) => {
            check_edge(lo, fs)?;
            check_edge(hi, fs)?;
            if lo >= hi {
                return Err(Error::arg(format!("band ({lo}, {hi}) is empty")));
            }
            let (wl, wh) = (warp(lo), warp(hi));
            let bw = wh - wl;
            let wo = (wl * wh).sqrt();
            let mut poles = Vec::with_capacity(2 * order);
            for p in &proto {
                let p_lp = p * (bw / 2.0);
                let root = (p_lp * p_lp - wo * wo).sqrt();
                poles.push(p_lp + root);
                poles.push(p_lp - root);
            }
            let centre = fs / PI * (wo / (2.0 * fs)).atan();
            (poles, centre)
        }
    };

    let fs2 = C64::new(2.0 * fs, 0.0);
    let digital: Vec<C64> = analog_poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();

    // group poles into conjugate pairs, then leftover real poles two at a time
    let mut pairs: Vec<(C64, C64)> = Vec::new();
    let mut reals: Vec<f64> = Vec::new();
    for p in &digital {
        if p.im > 1e-12 {
            pairs.push((*p, p.conj()));
        } else if p.im.abs() <= 1e-12 {
            reals.push(p.re);
        }
    }
    reals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut denominators: Vec<[f64; 3]> = pairs
        .iter()
        .map(|(p, q)| {
            let s = p + q;
            let m = p * q;
            [1.0, -s.re, m.re]
        })
        .collect();
    for chunk in reals.chunks(2) {
        match *chunk {
            [a, b] => denominators.push([1.0, -(a + b), a * b]),
            [a] => denominators.push([1.0, -a, 0.0]),
            _ => unreachable!(),
        }
    }
    let sections: Vec<[f64; 6]> = denominators
        .iter()
        .map(|den| {
            let first_order = den[2] == 0.0;
            let num = match (band, first_order) {
                (BandKind::BandPass(..), _) => [1.0, 0.0, -1.0],
                (BandKind::LowPass(_), false) => [1.0, 2.0, 1.0],
                (BandKind::LowPass(_), true) => [1.0, 1.0, 0.0],
                (BandKind::HighPass(_), false) => [1.0, -2.0, 1.0],
                (BandKind::HighPass(_), true) => [1.0, -1.0, 0.0],
            };
            [num[0], num[1], num[2], den[0], den[1], den[2]]
        })
        .collect();
    let mut sos = Sos { sections };
    let g = sos.gain(reference_hz, fs);
    if !(g.is_finite() && g > 0.0) {
        return Err(Error::arg("filter design is numerically degenerate"));
    }
    for v in &mut sos.sections[0][..3] {
        *v /= g;
    }
    Ok(sos)
}

/// Second-order IIR notch at `f0` with quality factor `q`.
pub fn notch(f0: f64, q: f64, fs: f64) -> Result<Sos> {
    check_edge(f0, fs)?;
    if !(q > 0.0) {
        return Err(Error::arg("quality factor must be positive"));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let bw = w0 / q;
    let beta = (bw / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok(Sos { sections: vec![[gain, -2.0 * gain * c, gain, 1.0, -2.0 * gain * c, 2.0 * gain - 1.0]] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(f: f64, fs: f64, n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs + phase).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn butterworth_half_power_at_cutoff() {
        let fs = 250.0;
        let lp = butterworth(4, BandKind::LowPass(30.0), fs).unwrap();
        assert!((lp.gain(0.0, fs) - 1.0).abs() < 1e-12);
        assert!((lp.gain(30.0, fs) - 0.5f64.sqrt()).abs() < 1e-9);
        let hp = butterworth(3, BandKind::HighPass(10.0), fs).unwrap();
        assert!((hp.gain(10.0, fs) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!(hp.gain(0.0, fs) < 1e-12);
        let bp = butterworth(4, BandKind::BandPass(8.0, 90.0), fs).unwrap();
        assert_eq!(bp.sections().len(), 4);
        assert!((bp.gain(8.0, fs) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((bp.gain(90.0, fs) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((bp.gain(30.0, fs) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn notch_response() {
        let fs = 250.0;
        let n = notch(50.0, 35.0, fs).unwrap();
        assert!(n.gain(50.0, fs) < 1e-12);
        assert!((n.gain(0.0, fs) - 1.0).abs() < 1e-12);
        assert!((n.gain(10.0, fs) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn filtfilt_is_zero_phase() {
        let fs = 250.0;
        let bp = butterworth(4, BandKind::BandPass(8.0, 40.0), fs).unwrap();
        let x = tone(15.0, fs, 1000, 0.3);
        let y = bp.filtfilt(&x);
        let mid = 200..800;
        let xcorr = |lag: i64| -> f64 { mid.clone().map(|i| x[i] * y[(i as i64 + lag) as usize]).sum() };
        let best = (-5..=5).max_by(|&a, &b| xcorr(a).partial_cmp(&xcorr(b)).unwrap()).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn filtfilt_is_linear() {
        let fs = 250.0;
        let bp = butterworth(4, BandKind::BandPass(8.0, 90.0), fs).unwrap();
        let x = tone(11.0, fs, 400, 0.1);
        let z: Vec<f64> = (0..400).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.5).collect();
        let (a, b) = (2.5, -0.7);
        let mix: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
        let lhs = bp.filtfilt(&mix);
        let fx = bp.filtfilt(&x);
        let fz = bp.filtfilt(&z);
        let scale = rms(&lhs);
        for i in 0..400 {
            assert!((lhs[i] - (a * fx[i] + b * fz[i])).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn steady_state_start_passes_dc() {
        let lp = butterworth(4, BandKind::LowPass(20.0), 250.0).unwrap();
        let y = lp.filter_steady(&[3.0; 50]);
        assert!(y.iter().all(|v| (v - 3.0).abs() < 1e-9));
        let cold = lp.filter(&[3.0; 50]);
        assert!(cold[0].abs() < 1.0);
    }
}
