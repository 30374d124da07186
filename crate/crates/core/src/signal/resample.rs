use std::f64::consts::PI;

use super::EcgRecord;
use crate::error::{Error, Result};

/// How [`resample_with`] computes the new samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ResampleMethod {
    /// Kaiser-windowed sinc, rational up/down ratio.
    #[default]
    Polyphase,
    /// Linear interpolation without anti-alias filtering.
    Linear,
}

/// Downsamples `rec` to `target_fs` with the polyphase method.
pub fn resample(rec: &EcgRecord, target_fs: u32) -> Result<EcgRecord> {
    resample_with(rec, target_fs, ResampleMethod::Polyphase)
}

pub fn resample_with(rec: &EcgRecord, target_fs: u32, method: ResampleMethod) -> Result<EcgRecord> {
    if target_fs == 0 {
        return Err(Error::invalid("target_fs", "must be positive"));
    }
    if target_fs > rec.fs {
        return Err(Error::invalid(
            "target_fs",
            format!("upsampling {} Hz -> {} Hz is not supported", rec.fs, target_fs),
        ));
    }
    if target_fs == rec.fs {
        return Ok(rec.clone());
    }
    let g = gcd(rec.fs as usize, target_fs as usize);
    let (up, down) = (target_fs as usize / g, rec.fs as usize / g);
    let n_out = (rec.n_samples() as f64 * up as f64 / down as f64).round() as usize;
    let signal = match method {
        ResampleMethod::Polyphase => {
            let taps = lowpass_taps(up, down);
            rec.signal
                .iter()
                .map(|x| polyphase(x, up, down, n_out, &taps))
                .collect()
        }
        ResampleMethod::Linear => rec.signal.iter().map(|x| linear(x, up, down, n_out)).collect(),
    };
    Ok(rec.with_signal(signal, target_fs))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Lowpass at the upsampled rate with cutoff at the lower of the two Nyquist
/// rates, scaled by `up` so the passband gain after zero-stuffing is one.
fn lowpass_taps(up: usize, down: usize) -> Vec<f64> {
    const BETA: f64 = 5.0;
    let max_rate = up.max(down);
    let half = 10 * max_rate;
    let len = 2 * half + 1;
    let cutoff = 1.0 / max_rate as f64;
    let denom = bessel_i0(BETA);
    let mut h: Vec<f64> = (0..len)
        .map(|i| {
            let m = i as f64 - half as f64;
            let sinc = if m == 0.0 {
                1.0
            } else {
                let a = PI * cutoff * m;
                a.sin() / a
            };
            let r = m / half as f64;
            let window = bessel_i0(BETA * (1.0 - r * r).max(0.0).sqrt()) / denom;
            cutoff * sinc * window
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v *= up as f64 / dc);
    h
}

/// Sample `j` of `x`, odd-reflected about the end points outside `[0, n)`.
fn reflected(x: &[f64], j: isize) -> f64 {
    let n = x.len() as isize;
    if j < 0 {
        let k = (-j).min(n - 1);
        2.0 * x[0] - x[k as usize]
    } else if j >= n {
        let k = (2 * (n - 1) - j).max(0);
        2.0 * x[(n - 1) as usize] - x[k as usize]
    } else {
        x[j as usize]
    }
}

fn polyphase(x: &[f64], up: usize, down: usize, n_out: usize, taps: &[f64]) -> Vec<f64> {
    let half = (taps.len() / 2) as isize;
    let (up_i, down_i) = (up as isize, down as isize);
    (0..n_out as isize)
        .map(|k| {
            // Output k sits at position k·down on the upsampled grid; input j at j·up.
            let center = k * down_i;
            let j_lo = (center - half).div_euclid(up_i) + isize::from((center - half).rem_euclid(up_i) != 0);
            let j_hi = (center + half).div_euclid(up_i);
            (j_lo..=j_hi)
                .map(|j| taps[(half + center - j * up_i) as usize] * reflected(x, j))
                .sum()
        })
        .collect()
}

fn linear(x: &[f64], up: usize, down: usize, n_out: usize) -> Vec<f64> {
    (0..n_out)
        .map(|k| {
            let pos = (k * down) as f64 / up as f64;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            let a = x[i.min(x.len() - 1)];
            let b = x[(i + 1).min(x.len() - 1)];
            a + frac * (b - a)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::test_record;

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn sine_record(freq: f64, fs: u32, n: usize) -> EcgRecord {
        let x = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / fs as f64).sin())
            .collect();
        test_record(vec![x], fs)
    }

    #[test]
    fn five_hundred_to_one_hundred() {
        let rec = test_record(vec![vec![0.0; 5000]; 2], 500);
        let out = resample(&rec, 100).unwrap();
        assert_eq!(out.fs, 100);
        assert_eq!(out.n_samples(), 1000);
        assert_eq!(out.n_leads(), 2);
        assert_eq!(out.labels, rec.labels);
    }

    #[test]
    fn identity_rate_returns_same_signal() {
        let rec = sine_record(3.0, 100, 400);
        let out = resample(&rec, 100).unwrap();
        assert_eq!(out, rec);
    }

    #[test]
    fn upsampling_rejected() {
        let rec = sine_record(3.0, 100, 400);
        assert!(resample(&rec, 250).is_err());
    }

    #[test]
    fn sine_survives_decimation() {
        let rec = sine_record(2.0, 500, 5000);
        let out = resample(&rec, 100).unwrap();
        let analytic: Vec<f64> = (0..1000).map(|i| (2.0 * PI * 2.0 * i as f64 / 100.0).sin()).collect();
        let r = correlation(&out.signal[0], &analytic);
        assert!(r > 0.999, "{r}");
        let max_err = out.signal[0]
            .iter()
            .zip(&analytic)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 0.01, "{max_err}");
    }

    #[test]
    fn rational_ratio() {
        let rec = sine_record(2.0, 360, 3600);
        let out = resample(&rec, 100).unwrap();
        assert_eq!(out.n_samples(), 1000);
        let analytic: Vec<f64> = (0..1000).map(|i| (2.0 * PI * 2.0 * i as f64 / 100.0).sin()).collect();
        assert!(correlation(&out.signal[0], &analytic) > 0.999);
        let lin = resample_with(&rec, 100, ResampleMethod::Linear).unwrap();
        assert!(correlation(&lin.signal[0], &analytic) > 0.999);
    }

    #[test]
    fn aliasing_tone_is_suppressed() {
        // 80 Hz is above the new Nyquist of 50 Hz and would alias to 20 Hz.
        let rec = sine_record(80.0, 500, 5000);
        let out = resample(&rec, 100).unwrap();
        let inner = &out.signal[0][50..950];
        let rms = (inner.iter().map(|v| v * v).sum::<f64>() / inner.len() as f64).sqrt();
        assert!(rms < 0.01, "{rms}");
    }

    #[test]
    fn second_resample_is_identity() {
        let rec = sine_record(1.3, 500, 2500);
        let once = resample(&rec, 100).unwrap();
        let twice = resample(&once, 100).unwrap();
        assert_eq!(once, twice);
    }
}
