//! Chebyshev type II band-pass filter bank applied zero-phase.
//!
//! A band is specified by its passband edges and a transition width; the
//! stopband begins `trans_hz` outside each passband edge, and that is where
//! the equiripple stopband of the design is anchored. `order` is the order
//! of the analog low-pass prototype, so a band-pass cascade has `order`
//! second-order sections.

mod design;

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Extra stopband attenuation designed in so that the measured stopband
/// stays at or below the requested level despite round-off.
pub const DESIGN_MARGIN_DB: f64 = 0.5;

/// Magnitudes below this are reported at this level (-300 dB) instead of `-inf`.
const MIN_MAGNITUDE: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
    pub stop_atten_db: f64,
    pub trans_hz: f64,
}

impl BandSpec {
    pub fn new(low_hz: f64, high_hz: f64) -> Self {
        Self {
            low_hz,
            high_hz,
            order: 4,
            stop_atten_db: 30.0,
            trans_hz: 2.0,
        }
    }

    pub fn check(&self, fs: f64) -> Result<()> {
        let fail = |msg: String| Err(Error::Design(msg));
        if !(fs > 0.0) {
            return fail(format!("sampling rate {fs} must be positive"));
        }
        if self.order < 2 || !self.order.is_multiple_of(2) {
            return fail(format!("order {} must be even and at least 2", self.order));
        }
        if !(self.stop_atten_db > 0.0) {
            return fail(format!(
                "stopband attenuation {} dB must be positive",
                self.stop_atten_db
            ));
        }
        if !(self.trans_hz > 0.0) {
            return fail(format!(
                "transition width {} Hz must be positive",
                self.trans_hz
            ));
        }
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz) {
            return fail(format!(
                "passband edges must satisfy 0 < low < high, got {}..{} Hz",
                self.low_hz, self.high_hz
            ));
        }
        if self.low_hz - self.trans_hz <= 0.0 {
            return fail(format!(
                "lower stopband edge {} Hz is not above DC (low {} - transition {})",
                self.low_hz - self.trans_hz,
                self.low_hz,
                self.trans_hz
            ));
        }
        if self.high_hz + self.trans_hz >= fs / 2.0 {
            return fail(format!(
                "upper stopband edge {} Hz reaches Nyquist {} Hz",
                self.high_hz + self.trans_hz,
                fs / 2.0
            ));
        }
        Ok(())
    }

    pub fn stop_edges(&self) -> (f64, f64) {
        (self.low_hz - self.trans_hz, self.high_hz + self.trans_hz)
    }

    pub fn center_hz(&self) -> f64 {
        (self.low_hz * self.high_hz).sqrt()
    }
}

/// Biquad `(b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SosSection {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl SosSection {
    pub const IDENTITY: SosSection = SosSection {
        b0: 1.0,
        b1: 0.0,
        b2: 0.0,
        a1: 0.0,
        a2: 0.0,
    };

    /// Largest pole modulus.
    pub fn pole_radius(&self) -> f64 {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let r1 = (-self.a1 + disc) / 2.0;
        let r2 = (-self.a1 - disc) / 2.0;
        r1.norm().max(r2.norm())
    }

    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SosCascade {
    pub sections: Vec<SosSection>,
    pub design_fs: f64,
}

impl SosCascade {
    pub fn identity(fs: f64) -> Self {
        Self {
            sections: vec![SosSection::IDENTITY],
            design_fs: fs,
        }
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.sections
            .iter()
            .map(SosSection::pole_radius)
            .fold(0.0, f64::max)
    }

    pub fn is_stable(&self) -> bool {
        self.max_pole_radius() < 1.0
    }

    /// Samples of odd-extension padding used by [`filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.sections.len()).max(24)
    }

    /// Direct-form II transposed states giving the steady-state response to a
    /// unit step, per section.
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let h = s.dc_gain();
                let z2 = s.b2 - s.a2 * h;
                let z1 = s.b1 - s.a1 * h + z2;
                let out = [z1 * scale, z2 * scale];
                scale *= h;
                out
            })
            .collect()
    }

    /// Causal filtering starting from `states` (modified in place).
    fn run(&self, x: &mut [f64], states: &mut [[f64; 2]]) {
        for (s, z) in self.sections.iter().zip(states.iter_mut()) {
            let [mut z1, mut z2] = *z;
            for v in x.iter_mut() {
                let xin = *v;
                let y = s.b0 * xin + z1;
                z1 = s.b1 * xin - s.a1 * y + z2;
                z2 = s.b2 * xin - s.a2 * y;
                *v = y;
            }
            *z = [z1, z2];
        }
    }
}

/// Designs a Chebyshev type II band-pass cascade for `spec` at `fs`.
pub fn design_cheby2_bandpass(spec: &BandSpec, fs: f64) -> Result<SosCascade> {
    spec.check(fs)?;
    let (lo, hi) = spec.stop_edges();
    let w1 = design::prewarp(lo, fs);
    let w2 = design::prewarp(hi, fs);
    let proto = design::cheby2_prototype(spec.order, spec.stop_atten_db + DESIGN_MARGIN_DB);
    let analog = design::lowpass_to_bandpass(&proto, (w1 * w2).sqrt(), w2 - w1);
    let digital = design::bilinear(&analog, fs);
    let cascade = SosCascade {
        sections: design::zpk_to_sos(&digital),
        design_fs: fs,
    };
    if !cascade.is_stable() {
        return Err(Error::Design(format!(
            "{}..{} Hz design is unstable (pole radius {})",
            spec.low_hz,
            spec.high_hz,
            cascade.max_pole_radius()
        )));
    }
    Ok(cascade)
}

/// Chebyshev type II low-pass whose stopband starts at `stop_hz`.
pub fn design_cheby2_lowpass(
    stop_hz: f64,
    order: usize,
    stop_atten_db: f64,
    fs: f64,
) -> Result<SosCascade> {
    if !(stop_hz > 0.0 && stop_hz < fs / 2.0) {
        return Err(Error::Design(format!(
            "low-pass stopband edge {stop_hz} Hz must lie in (0, {}) Hz",
            fs / 2.0
        )));
    }
    if order < 2 || !order.is_multiple_of(2) {
        return Err(Error::Design(format!(
            "order {order} must be even and at least 2"
        )));
    }
    let proto = design::cheby2_prototype(order, stop_atten_db + DESIGN_MARGIN_DB);
    let analog = design::lowpass_to_lowpass(&proto, design::prewarp(stop_hz, fs));
    let digital = design::bilinear(&analog, fs);
    let cascade = SosCascade {
        sections: design::zpk_to_sos(&digital),
        design_fs: fs,
    };
    if !cascade.is_stable() {
        return Err(Error::Design(format!(
            "low-pass at {stop_hz} Hz is unstable"
        )));
    }
    Ok(cascade)
}

/// Magnitude response in dB at each frequency (Hz).
pub fn frequency_response(c: &SosCascade, freqs: &[f64]) -> Result<Vec<f64>> {
    let nyq = c.design_fs / 2.0;
    freqs
        .iter()
        .map(|&f| {
            if !(0.0..=nyq * (1.0 + 1e-12)).contains(&f) {
                return Err(Error::Domain(format!(
                    "frequency {f} Hz outside [0, {nyq}]"
                )));
            }
            let z_inv = Complex64::from_polar(1.0, -2.0 * PI * f / c.design_fs);
            let h: Complex64 = c.sections.iter().map(|s| s.response(z_inv)).product();
            Ok(20.0 * h.norm().max(MIN_MAGNITUDE).log10())
        })
        .collect()
}

/// Zero-phase forward-backward filtering with odd-symmetric edge padding and
/// steady-state initial conditions.
pub fn filtfilt(signal: &[f64], c: &SosCascade) -> Result<Vec<f64>> {
    let n = signal.len();
    let pad = c.pad_len();
    if n <= pad {
        return Err(Error::Shape(format!(
            "signal of {n} samples too short for {pad}-sample edge padding"
        )));
    }
    if let Some(i) = signal.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite input sample at {i}")));
    }
    let (first, last) = (signal[0], signal[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    let zi = c.step_states();
    let scaled = |x0: f64| zi.iter().map(|[a, b]| [a * x0, b * x0]).collect::<Vec<_>>();

    let mut states = scaled(ext[0]);
    c.run(&mut ext, &mut states);
    ext.reverse();
    let mut states = scaled(ext[0]);
    c.run(&mut ext, &mut states);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// [`filtfilt`] over a 1-D tensor.
pub fn filtfilt_tensor(signal: &Tensor, c: &SosCascade) -> Result<Tensor> {
    if signal.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "filtfilt expects [T], got {:?}",
            signal.shape()
        )));
    }
    Ok(Tensor::from_vec(filtfilt(signal.data(), c)?))
}

/// Ordered set of designed bands.
#[derive(Clone, Debug)]
pub struct FilterBank {
    pub bands: Vec<(BandSpec, SosCascade)>,
    pub fs: f64,
}

impl FilterBank {
    /// Designs every band; bands are ordered by ascending `low_hz`.
    pub fn new(mut specs: Vec<BandSpec>, fs: f64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Design("filter bank needs at least one band".into()));
        }
        specs.sort_by(|a, b| a.low_hz.total_cmp(&b.low_hz));
        let bands = specs
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                design_cheby2_bandpass(&s, fs)
                    .map(|c| (s, c))
                    .map_err(|e| Error::Design(format!("band {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bands, fs })
    }

    /// `n` contiguous bands of `width_hz` starting at `start_hz`, all sharing
    /// the order, attenuation and transition width of `template`.
    pub fn contiguous(
        start_hz: f64,
        width_hz: f64,
        n: usize,
        template: BandSpec,
        fs: f64,
    ) -> Result<Self> {
        let specs = (0..n)
            .map(|i| BandSpec {
                low_hz: start_hz + i as f64 * width_hz,
                high_hz: start_hz + (i + 1) as f64 * width_hz,
                ..template
            })
            .collect();
        Self::new(specs, fs)
    }

    /// Nine 4 Hz bands covering 4-40 Hz, order 4, 30 dB, 2 Hz transitions.
    pub fn default_bank(fs: f64) -> Result<Self> {
        Self::contiguous(4.0, 4.0, 9, BandSpec::new(4.0, 8.0), fs)
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn specs(&self) -> Vec<BandSpec> {
        self.bands.iter().map(|(s, _)| *s).collect()
    }
}

/// Filters every channel of `trial [C, T]` through every band: `[N_b, C, T]`.
pub fn split_bands(trial: &Tensor, bank: &FilterBank) -> Result<Tensor> {
    let shape = trial.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "split_bands expects [C, T], got {shape:?}"
        )));
    }
    let (c, t) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(bank.len() * c * t);
    for (bi, (_, cascade)) in bank.bands.iter().enumerate() {
        for ch in 0..c {
            let filtered = filtfilt(trial.row(ch), cascade).map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("band {bi}: {m}")),
                other => other,
            })?;
            out.extend(filtered);
        }
    }
    Tensor::new(&[bank.len(), c, t], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    fn sine(freq: f64, fs: f64, n: usize, phase: f64) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / fs + phase).sin())
            .collect()
    }

    /// Amplitude from the RMS of the central half, away from edge transients.
    fn central_amplitude(x: &[f64]) -> f64 {
        let (a, b) = (x.len() / 4, 3 * x.len() / 4);
        let ms = x[a..b].iter().map(|v| v * v).sum::<f64>() / (b - a) as f64;
        (2.0 * ms).sqrt()
    }

    fn xcorr_peak_lag(a: &[f64], b: &[f64], max_lag: isize) -> isize {
        let n = a.len() as isize;
        (-max_lag..=max_lag)
            .max_by(|&l1, &l2| {
                let score = |lag: isize| -> f64 {
                    (0..n)
                        .filter(|&i| (0..n).contains(&(i + lag)))
                        .map(|i| a[i as usize] * b[(i + lag) as usize])
                        .sum()
                };
                score(l1).total_cmp(&score(l2))
            })
            .unwrap()
    }

    fn alpha_band() -> (BandSpec, SosCascade) {
        let spec = BandSpec::new(8.0, 12.0);
        (spec, design_cheby2_bandpass(&spec, 250.0).unwrap())
    }

    #[test]
    fn alpha_band_meets_its_spec() {
        let (spec, c) = alpha_band();
        assert_eq!(c.sections.len(), 4);
        assert!(c.is_stable());
        let db = frequency_response(&c, &[spec.center_hz(), 6.0, 14.0, 0.0, 125.0]).unwrap();
        assert!(db[0].abs() < 1.0, "centre {}", db[0]);
        for &v in &db[1..] {
            assert!(v <= -30.0, "stopband {v}");
        }
    }

    #[test]
    fn stopband_is_equiripple_at_the_requested_level() {
        let (_, c) = alpha_band();
        let freqs: Vec<f64> = (0..=1250).map(|i| i as f64 * 0.1).collect();
        let db = frequency_response(&c, &freqs).unwrap();
        let stop_max = freqs
            .iter()
            .zip(&db)
            .filter(|(f, _)| **f <= 6.0 || **f >= 14.0)
            .map(|(_, d)| *d)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            (-31.0..=-30.0).contains(&stop_max),
            "stopband peak {stop_max}"
        );
    }

    #[test]
    fn frequency_response_of_trivial_cascades() {
        let id = SosCascade::identity(250.0);
        let db = frequency_response(&id, &[0.0, 10.0, 125.0]).unwrap();
        assert!(db.iter().all(|v| v.abs() < 1e-12));

        let (_, c) = alpha_band();
        let one = SosCascade {
            sections: vec![c.sections[1]],
            design_fs: 250.0,
        };
        let two = SosCascade {
            sections: vec![c.sections[1], c.sections[1]],
            design_fs: 250.0,
        };
        let f = [3.0, 9.0, 40.0];
        let d1 = frequency_response(&one, &f).unwrap();
        let d2 = frequency_response(&two, &f).unwrap();
        for (a, b) in d1.iter().zip(&d2) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }
        assert!(matches!(
            frequency_response(&c, &[130.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            frequency_response(&c, &[-1.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn infeasible_specs_name_the_constraint() {
        let msg = |s: BandSpec| design_cheby2_bandpass(&s, 250.0).unwrap_err().to_string();
        assert!(msg(BandSpec::new(1.0, 10.0)).contains("DC"));
        assert!(msg(BandSpec::new(100.0, 124.0)).contains("Nyquist"));
        assert!(msg(BandSpec {
            order: 3,
            ..BandSpec::new(8.0, 12.0)
        })
        .contains("even"));
        assert!(msg(BandSpec::new(12.0, 8.0)).contains("low < high"));
    }

    #[test]
    fn default_bank_is_stable_at_both_rates() {
        for fs in [250.0, 2500.0] {
            let bank = FilterBank::default_bank(fs).unwrap();
            assert_eq!(bank.len(), 9);
            for (spec, c) in &bank.bands {
                assert!(c.is_stable(), "{spec:?} at {fs}");
            }
            let lows: Vec<f64> = bank.specs().iter().map(|s| s.low_hz).collect();
            assert!(lows.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn passband_sine_keeps_amplitude_and_phase() {
        let (_, c) = alpha_band();
        let x = sine(10.0, 250.0, 1000, 0.3);
        let y = filtfilt(&x, &c).unwrap();
        let amp = central_amplitude(&y);
        assert!((amp - 1.0).abs() < 0.05, "amplitude {amp}");
        assert_eq!(xcorr_peak_lag(&x, &y, 12), 0);
    }

    #[test]
    fn stopband_sine_is_suppressed() {
        let (_, c) = alpha_band();
        let x = sine(25.0, 250.0, 1000, 0.0);
        let y = filtfilt(&x, &c).unwrap();
        let ratio = central_amplitude(&x) / central_amplitude(&y);
        assert!(20.0 * ratio.log10() >= 28.0, "attenuation {ratio}");
        assert!(ratio >= 25.0);
    }

    #[test]
    fn filtfilt_zero_short_and_linear() {
        let (_, c) = alpha_band();
        assert!(filtfilt(&vec![0.0; 300], &c)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(matches!(filtfilt(&vec![1.0; 50], &c), Err(Error::Shape(_))));

        let mut rng = RngState::new(4);
        let x: Vec<f64> = (0..400).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..400).map(|_| rng.normal()).collect();
        let (a, b) = (1.7, -0.4);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = filtfilt(&x, &c).unwrap();
        let fy = filtfilt(&y, &c).unwrap();
        let fm = filtfilt(&mix, &c).unwrap();
        let scale = fm.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..400 {
            assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() <= 1e-9 * scale);
        }
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn wide_band_is_near_allpass_for_band_limited_noise() {
        let spec = BandSpec {
            trans_hz: 0.5,
            ..BandSpec::new(1.0, 45.0)
        };
        let bank = FilterBank::new(vec![spec], 250.0).unwrap();
        // Noise built from random-phase tones between 3 and 20 Hz.
        let mut rng = RngState::new(21);
        let mut trial = vec![0.0; 2 * 1000];
        for ch in 0..2 {
            for k in 0..40 {
                let f = 3.0 + 17.0 * k as f64 / 40.0;
                let ph = rng.uniform_range(0.0, 2.0 * PI);
                for (i, v) in trial[ch * 1000..(ch + 1) * 1000].iter_mut().enumerate() {
                    *v += (2.0 * PI * f * i as f64 / 250.0 + ph).sin();
                }
            }
        }
        let x = Tensor::new(&[2, 1000], trial).unwrap();
        let y = split_bands(&x, &bank).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1000]);
        for ch in 0..2 {
            let r = correlation(x.row(ch), &y.data()[ch * 1000..(ch + 1) * 1000]);
            assert!(r > 0.95, "channel {ch} correlation {r}");
        }
    }

    #[test]
    fn two_tones_separate_into_their_bands() {
        let bank = FilterBank::new(
            vec![BandSpec::new(24.0, 28.0), BandSpec::new(8.0, 12.0)],
            250.0,
        )
        .unwrap();
        assert_eq!(bank.specs()[0].low_hz, 8.0);
        let a = sine(10.0, 250.0, 1000, 0.1);
        let b = sine(25.0, 250.0, 1000, 1.1);
        let x: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
        let trial = Tensor::new(&[1, 1000], x).unwrap();
        let out = split_bands(&trial, &bank).unwrap();
        let band0 = &out.data()[..1000];
        let band1 = &out.data()[1000..];
        for (got, want) in [(band0, &a), (band1, &b)] {
            let err: Vec<f64> = got.iter().zip(want.iter()).map(|(g, w)| g - w).collect();
            assert!((central_amplitude(got) - 1.0).abs() < 0.05);
            assert!(central_amplitude(&err) < 0.05);
        }
        let zero = split_bands(&Tensor::zeros(&[3, 400]), &bank).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        match split_bands(&Tensor::zeros(&[1, 20]), &bank) {
            Err(Error::Shape(m)) => assert!(m.contains("band 0"), "{m}"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn distant_band_rejects_foreign_tone() {
        let bank = FilterBank::default_bank(250.0).unwrap();
        // 10 Hz sits in band 1 (8-12 Hz); bands 3.. are non-adjacent.
        let x = Tensor::new(&[1, 1000], sine(10.0, 250.0, 1000, 0.0)).unwrap();
        let out = split_bands(&x, &bank).unwrap();
        let power = |b: usize| {
            let s = &out.data()[b * 1000 + 250..b * 1000 + 750];
            s.iter().map(|v| v * v).sum::<f64>() / 500.0
        };
        let reference = power(1);
        for b in 3..9 {
            let rel_db = 10.0 * (power(b) / reference).log10();
            assert!(rel_db <= -(30.0 - 5.0), "band {b}: {rel_db} dB");
        }
    }
}
