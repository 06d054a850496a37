//! Chebyshev type II design in zero-pole-gain form, realised as biquads.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::SosSection;

/// Zeros, poles and gain of an analog or digital filter.
#[derive(Clone, Debug)]
pub(crate) struct Zpk {
    pub zeros: Vec<Complex64>,
    pub poles: Vec<Complex64>,
    pub gain: f64,
}

/// Analog low-pass prototype with its stopband starting at 1 rad/s and
/// equiripple stopband gain of `-atten_db`.
pub(crate) fn cheby2_prototype(order: usize, atten_db: f64) -> Zpk {
    let n = order as f64;
    let de = 1.0 / (10f64.powf(0.1 * atten_db) - 1.0).sqrt();
    let mu = (1.0 / de).asinh() / n;

    // Zeros at j / sin(m pi / 2N) for odd m; the m = 0 term is skipped for odd N.
    let ms: Vec<i64> = if order % 2 == 1 {
        (-(order as i64) + 1..0)
            .step_by(2)
            .chain((2..order as i64).step_by(2))
            .collect()
    } else {
        (-(order as i64) + 1..order as i64).step_by(2).collect()
    };
    let zeros: Vec<Complex64> = ms
        .iter()
        .map(|&m| {
            let z = Complex64::i() / (m as f64 * PI / (2.0 * n)).sin();
            -z.conj()
        })
        .collect();

    let poles: Vec<Complex64> = (-(order as i64) + 1..order as i64)
        .step_by(2)
        .map(|m| {
            let base = -Complex64::from_polar(1.0, PI * m as f64 / (2.0 * n));
            let p = Complex64::new(mu.sinh() * base.re, mu.cosh() * base.im);
            1.0 / p
        })
        .collect();

    let num: Complex64 = poles.iter().map(|p| -p).product();
    let den: Complex64 = zeros.iter().map(|z| -z).product();
    Zpk {
        zeros,
        poles,
        gain: (num / den).re,
    }
}

/// Analog frequency for the bilinear transform at `fs` so that `f_hz` lands
/// exactly on the digital frequency `f_hz`.
pub(crate) fn prewarp(f_hz: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f_hz / fs).tan()
}

pub(crate) fn lowpass_to_lowpass(proto: &Zpk, wo: f64) -> Zpk {
    let degree = proto.poles.len() as i32 - proto.zeros.len() as i32;
    Zpk {
        zeros: proto.zeros.iter().map(|z| z * wo).collect(),
        poles: proto.poles.iter().map(|p| p * wo).collect(),
        gain: proto.gain * wo.powi(degree),
    }
}

/// Low-pass to band-pass around centre `wo` with bandwidth `bw` (rad/s).
pub(crate) fn lowpass_to_bandpass(proto: &Zpk, wo: f64, bw: f64) -> Zpk {
    let degree = proto.poles.len() - proto.zeros.len();
    let split = |r: &Complex64| {
        let half = r * (bw / 2.0);
        let disc = (half * half - wo * wo).sqrt();
        [half + disc, half - disc]
    };
    let mut zeros: Vec<Complex64> = proto.zeros.iter().flat_map(split).collect();
    zeros.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), degree));
    Zpk {
        zeros,
        poles: proto.poles.iter().flat_map(split).collect(),
        gain: proto.gain * bw.powi(degree as i32),
    }
}

pub(crate) fn bilinear(analog: &Zpk, fs: f64) -> Zpk {
    let fs2 = Complex64::new(2.0 * fs, 0.0);
    let degree = analog.poles.len() - analog.zeros.len();
    let mut zeros: Vec<Complex64> = analog.zeros.iter().map(|z| (fs2 + z) / (fs2 - z)).collect();
    zeros.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), degree));
    let poles = analog.poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    let num: Complex64 = analog.zeros.iter().map(|z| fs2 - z).product();
    let den: Complex64 = analog.poles.iter().map(|p| fs2 - p).product();
    Zpk {
        zeros,
        poles,
        gain: analog.gain * (num / den).re,
    }
}

/// A root, or a conjugate/real pair of roots, forming one quadratic factor.
#[derive(Clone, Copy, Debug)]
enum RootGroup {
    Pair(Complex64, Complex64),
    Single(Complex64),
}

impl RootGroup {
    fn roots(&self) -> Vec<Complex64> {
        match *self {
            RootGroup::Pair(a, b) => vec![a, b],
            RootGroup::Single(a) => vec![a],
        }
    }

    /// `[1, c1, c2]` of `(1 - r1 z^-1)(1 - r2 z^-1)`.
    fn coefficients(&self) -> [f64; 3] {
        match *self {
            RootGroup::Pair(a, b) => [1.0, -(a + b).re, (a * b).re],
            RootGroup::Single(a) => [1.0, -a.re, 0.0],
        }
    }

    fn radius(&self) -> f64 {
        self.roots().iter().map(|r| r.norm()).fold(0.0, f64::max)
    }
}

const IMAG_TOL: f64 = 1e-10;

fn group_roots(roots: &[Complex64]) -> Vec<RootGroup> {
    let mut complex: Vec<Complex64> = roots.iter().copied().filter(|r| r.im > IMAG_TOL).collect();
    let mut real: Vec<f64> = roots
        .iter()
        .filter(|r| r.im.abs() <= IMAG_TOL)
        .map(|r| r.re)
        .collect();
    complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut groups: Vec<RootGroup> = complex
        .iter()
        .map(|&c| RootGroup::Pair(c, c.conj()))
        .collect();
    for chunk in real.chunks(2) {
        groups.push(match chunk {
            [a, b] => RootGroup::Pair(Complex64::new(*a, 0.0), Complex64::new(*b, 0.0)),
            [a] => RootGroup::Single(Complex64::new(*a, 0.0)),
            _ => unreachable!(),
        });
    }
    groups
}

/// Pairs every pole group with its nearest remaining zero group. The overall
/// gain is folded into the first section.
pub(crate) fn zpk_to_sos(zpk: &Zpk) -> Vec<SosSection> {
    let mut poles = group_roots(&zpk.poles);
    // Least resonant sections first.
    poles.sort_by(|a, b| a.radius().total_cmp(&b.radius()));
    let mut zeros = group_roots(&zpk.zeros);
    let mut sections = Vec::with_capacity(poles.len());
    for pg in &poles {
        let anchor = pg.roots()[0];
        let best = zeros
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = a
                    .roots()
                    .iter()
                    .map(|z| (z - anchor).norm())
                    .fold(f64::INFINITY, f64::min);
                let db = b
                    .roots()
                    .iter()
                    .map(|z| (z - anchor).norm())
                    .fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .map(|(i, _)| i);
        let b = match best {
            Some(i) => zeros.remove(i).coefficients(),
            None => [1.0, 0.0, 0.0],
        };
        let a = pg.coefficients();
        sections.push(SosSection {
            b0: b[0],
            b1: b[1],
            b2: b[2],
            a1: a[1],
            a2: a[2],
        });
    }
    if let Some(first) = sections.first_mut() {
        first.b0 *= zpk.gain;
        first.b1 *= zpk.gain;
        first.b2 *= zpk.gain;
    }
    sections
}
