use std::f64::consts::PI;

use num_complex::Complex64;

use super::{EcgRecord, FilterSpec};
use crate::error::{Error, Result};

/// One second-order section, `a[0] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

/// Cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + z_inv * self.b[1] + z2 * self.b[2]) / (self.a[0] + z_inv * self.a[1] + z2 * self.a[2])
    }

    /// State that makes a unit step input a steady state (transposed direct form II).
    fn step_state(&self) -> [f64; 2] {
        let gain = self.dc_gain();
        let z2 = self.b[2] - self.a[2] * gain;
        let z1 = self.b[1] - self.a[1] * gain + z2;
        [z1, z2]
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }
}

impl Sos {
    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, fs: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / fs);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Causal filtering with per-section initial state `zi`.
    pub fn filter(&self, x: &[f64], zi: Option<&[[f64; 2]]>) -> Vec<f64> {
        let mut y = x.to_vec();
        for (i, s) in self.sections.iter().enumerate() {
            let [mut z1, mut z2] = zi.map_or([0.0, 0.0], |z| z[i]);
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b[0] * xin + z1;
                z1 = s.b[1] * xin - s.a[1] * out + z2;
                z2 = s.b[2] * xin - s.a[2] * out;
                *v = out;
            }
        }
        y
    }

    /// Initial states for a steady-state unit step through the cascade.
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let [z1, z2] = s.step_state();
                let zi = [z1 * scale, z2 * scale];
                scale *= s.dc_gain();
                zi
            })
            .collect()
    }
}

/// Digital Butterworth bandpass of the given prototype order (the resulting
/// filter has order `2·order`), designed by prewarped bilinear transform and
/// returned as `order` second-order sections.
pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<Sos> {
    FilterSpec {
        order,
        low_hz,
        high_hz,
    }
    .validate(fs)?;
    let n = order;
    let fs2 = 2.0 * fs;
    let w1 = fs2 * (PI * low_hz / fs).tan();
    let w2 = fs2 * (PI * high_hz / fs).tan();
    let bw = w2 - w1;
    let w0_sq = w1 * w2;

    // Analog lowpass prototype poles on the unit circle, left half plane.
    let proto: Vec<Complex64> = (0..n)
        .map(|k| {
            let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect();

    // Lowpass -> bandpass: each prototype pole splits into two.
    let mut analog = Vec::with_capacity(2 * n);
    for p in &proto {
        let scaled = p * (bw / 2.0);
        let disc = (scaled * scaled - w0_sq).sqrt();
        analog.push(scaled + disc);
        analog.push(scaled - disc);
    }
    // n zeros at s = 0 and n at infinity; gain bw^n.
    let mut gain = Complex64::new(bw.powi(n as i32), 0.0);

    // Bilinear transform. Zeros at s = 0 land on z = 1, those at infinity on z = -1.
    let mut poles = Vec::with_capacity(2 * n);
    for p in &analog {
        poles.push((fs2 + p) / (fs2 - p));
        gain /= fs2 - p;
    }
    gain *= fs2.powi(n as i32);
    let gain = gain.re;

    let sections = pair_poles(poles)?
        .into_iter()
        .map(|(pa, pb)| {
            let a1 = -(pa + pb).re;
            let a2 = (pa * pb).re;
            Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, a1, a2],
            }
        })
        .collect::<Vec<_>>();
    let per_section = gain.abs().powf(1.0 / n as f64);
    let mut sections = sections;
    for (i, s) in sections.iter_mut().enumerate() {
        let g = if i == 0 { per_section * gain.signum() } else { per_section };
        s.b.iter_mut().for_each(|b| *b *= g);
    }
    Ok(Sos { sections })
}

/// Groups poles into conjugate pairs, then leftover real poles two at a time.
fn pair_poles(poles: Vec<Complex64>) -> Result<Vec<(Complex64, Complex64)>> {
    const TOL: f64 = 1e-10;
    let (mut real, complex): (Vec<_>, Vec<_>) = poles.into_iter().partition(|p| p.im.abs() < TOL);
    let mut pairs: Vec<(Complex64, Complex64)> = complex
        .iter()
        .filter(|p| p.im > 0.0)
        .map(|p| (*p, p.conj()))
        .collect();
    if pairs.len() * 2 != complex.len() {
        return Err(Error::invalid("filter design", "unpaired complex pole"));
    }
    real.sort_by(|a, b| a.re.total_cmp(&b.re));
    if real.len() % 2 != 0 {
        return Err(Error::invalid("filter design", "odd number of real poles"));
    }
    pairs.extend(real.chunks(2).map(|c| (Complex64::new(c[0].re, 0.0), Complex64::new(c[1].re, 0.0))));
    Ok(pairs)
}

/// Zero-phase forward-backward filtering with odd-extension padding and
/// steady-state initial conditions at both ends.
pub fn filtfilt(sos: &Sos, x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len();
    let pad = (3 * (2 * sos.sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let unit = sos.step_states();
    let scaled = |v: f64| unit.iter().map(|[a, b]| [a * v, b * v]).collect::<Vec<_>>();
    let fwd = sos.filter(&ext, Some(&scaled(ext[0])));
    let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
    rev = sos.filter(&rev, Some(&scaled(rev[0])));
    rev.reverse();
    rev[pad..pad + n].to_vec()
}

/// Filters every lead independently with a zero-phase Butterworth bandpass.
pub fn bandpass(rec: &EcgRecord, spec: &FilterSpec) -> Result<EcgRecord> {
    let fs = rec.fs as f64;
    let sos = butter_bandpass(spec.order, spec.low_hz, spec.high_hz, fs)?;
    let signal = rec.signal.iter().map(|lead| filtfilt(&sos, lead)).collect();
    Ok(rec.with_signal(signal, rec.fs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::test_record;

    /// Squared magnitude of an analog Butterworth bandpass of prototype order
    /// `n`, evaluated at the prewarped frequency of `f`.
    fn analog_oracle(n: usize, low: f64, high: f64, fs: f64, f: f64) -> f64 {
        let warp = |f: f64| (PI * f / fs).tan();
        let (w1, w2, w) = (warp(low), warp(high), warp(f));
        let x = (w * w - w1 * w2) / (w * (w2 - w1));
        1.0 / (1.0 + x.powi(2 * n as i32))
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn magnitude_matches_analog_butterworth() {
        let sos = butter_bandpass(5, 0.67, 40.0, 100.0).unwrap();
        assert_eq!(sos.sections.len(), 5);
        for f in [0.05, 0.3, 0.67, 1.0, 5.0, 10.0, 25.0, 40.0, 45.0, 49.0] {
            let got = sos.response(f, 100.0).norm_sqr();
            let want = analog_oracle(5, 0.67, 40.0, 100.0, f);
            assert!((got - want).abs() < 1e-9, "f={f}: {got} vs {want}");
        }
    }

    #[test]
    fn narrow_band_design_matches_oracle() {
        let sos = butter_bandpass(2, 5.0, 15.0, 100.0).unwrap();
        for f in [1.0, 5.0, 8.66, 15.0, 30.0] {
            let got = sos.response(f, 100.0).norm_sqr();
            let want = analog_oracle(2, 5.0, 15.0, 100.0, f);
            assert!((got - want).abs() < 1e-9, "f={f}: {got} vs {want}");
        }
    }

    #[test]
    fn flat_line_goes_to_zero() {
        let rec = test_record(vec![vec![1.0; 1000]], 100);
        let out = bandpass(&rec, &FilterSpec::default()).unwrap();
        assert!(out.signal[0].iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn passband_and_stopband_rms() {
        let fs = 100.0;
        let pass = test_record(vec![sine(10.0, fs, 2000)], 100);
        let out = bandpass(&pass, &FilterSpec::default()).unwrap();
        let ratio = rms(&out.signal[0]) / rms(&pass.signal[0]);
        // filtfilt applies |H|² once
        let oracle = analog_oracle(5, 0.67, 40.0, fs, 10.0);
        assert!((0.9..=1.1).contains(&ratio), "{ratio}");
        assert!((ratio - oracle).abs() < 0.01, "{ratio} vs {oracle}");

        let stop = test_record(vec![sine(0.1, fs, 6000)], 100);
        let out = bandpass(&stop, &FilterSpec::default()).unwrap();
        let ratio = rms(&out.signal[0]) / rms(&stop.signal[0]);
        assert!(ratio < 0.2, "{ratio}");
    }

    #[test]
    fn rejects_cutoff_at_nyquist() {
        let rec = test_record(vec![vec![0.0; 300]], 100);
        let spec = FilterSpec {
            order: 5,
            low_hz: 1.0,
            high_hz: 50.0,
        };
        assert!(bandpass(&rec, &spec).is_err());
    }

    #[test]
    fn zero_phase_spike_train() {
        let mut x = vec![0.0; 1000];
        for i in (50..1000).step_by(83) {
            x[i] = 1.0;
        }
        let sos = butter_bandpass(5, 0.67, 40.0, 100.0).unwrap();
        let y = filtfilt(&sos, &x);
        let xcorr = |lag: isize| -> f64 {
            (0..x.len() as isize)
                .filter_map(|i| {
                    let j = i + lag;
                    (j >= 0 && (j as usize) < y.len()).then(|| x[i as usize] * y[j as usize])
                })
                .sum()
        };
        let best = (-20..=20).max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn filtering_is_linear() {
        let sos = butter_bandpass(5, 0.67, 40.0, 100.0).unwrap();
        let x: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
        let y: Vec<f64> = (0..500).map(|i| (i as f64 * 0.13).sin() + 0.3).collect();
        let (a, b) = (2.5, -0.7);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = filtfilt(&sos, &mix);
        let (fx, fy) = (filtfilt(&sos, &x), filtfilt(&sos, &y));
        let scale = lhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..500 {
            let rhs = a * fx[i] + b * fy[i];
            assert!((lhs[i] - rhs).abs() <= 1e-6 * scale, "{i}");
        }
    }
}
