//! Constellations, random symbol frames and symbol moments.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::CMatrix;
use crate::error::{Error, Result};
use crate::params::ScenarioConfig;

/// Constellation identifier as it appears in configuration files.
///
/// `BPSK` and `8QAM` parse so that validation can reject them with a clear
/// message, but they cannot be constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstellationKind {
    #[serde(rename = "QPSK")]
    Qpsk,
    #[serde(rename = "16QAM")]
    Qam16,
    #[serde(rename = "64QAM")]
    Qam64,
    #[serde(rename = "256QAM")]
    Qam256,
    #[serde(rename = "1024QAM")]
    Qam1024,
    #[serde(rename = "BPSK")]
    Bpsk,
    #[serde(rename = "8QAM")]
    Qam8,
}

impl ConstellationKind {
    pub const SUPPORTED: [ConstellationKind; 5] = [
        ConstellationKind::Qpsk,
        ConstellationKind::Qam16,
        ConstellationKind::Qam64,
        ConstellationKind::Qam256,
        ConstellationKind::Qam1024,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ConstellationKind::Qpsk => "QPSK",
            ConstellationKind::Qam16 => "16QAM",
            ConstellationKind::Qam64 => "64QAM",
            ConstellationKind::Qam256 => "256QAM",
            ConstellationKind::Qam1024 => "1024QAM",
            ConstellationKind::Bpsk => "BPSK",
            ConstellationKind::Qam8 => "8QAM",
        }
    }

    /// Whether the alphabet satisfies `E{s} = E{s^2} = 0`.
    pub fn is_supported(self) -> bool {
        !matches!(self, ConstellationKind::Bpsk | ConstellationKind::Qam8)
    }

    pub fn order(self) -> usize {
        match self {
            ConstellationKind::Qpsk => 4,
            ConstellationKind::Qam16 => 16,
            ConstellationKind::Qam64 => 64,
            ConstellationKind::Qam256 => 256,
            ConstellationKind::Qam1024 => 1024,
            ConstellationKind::Bpsk => 2,
            ConstellationKind::Qam8 => 8,
        }
    }
}

impl fmt::Display for ConstellationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ConstellationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase().replace(['-', '_'], "");
        [ConstellationKind::Bpsk, ConstellationKind::Qam8]
            .into_iter()
            .chain(ConstellationKind::SUPPORTED)
            .find(|k| k.label() == upper)
            .ok_or_else(|| Error::UnsupportedConstellation(s.to_string()))
    }
}

/// Unit-power symbol alphabet with zero mean and zero pseudo-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    pub points: Vec<Complex64>,
    pub kind: ConstellationKind,
}

impl Constellation {
    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn label(&self) -> &'static str {
        self.kind.label()
    }

    /// `E{|s|^4}` over the uniformly used alphabet.
    pub fn mu4(&self) -> f64 {
        mu4(self)
    }
}

/// Builds the square-QAM grid (QPSK is 4-QAM) normalized to unit average power.
pub fn make_constellation(kind: ConstellationKind) -> Result<Constellation> {
    if !kind.is_supported() {
        return Err(Error::UnsupportedConstellation(kind.label().to_string()));
    }
    let side = (kind.order() as f64).sqrt().round() as i32;
    let levels: Vec<f64> = (0..side).map(|k| (2 * k - (side - 1)) as f64).collect();
    let mut points: Vec<Complex64> = levels
        .iter()
        .flat_map(|&re| levels.iter().map(move |&im| Complex64::new(re, im)))
        .collect();
    let power = points.iter().map(|p| p.norm_sqr()).sum::<f64>() / points.len() as f64;
    let scale = power.sqrt().recip();
    for p in &mut points {
        *p *= scale;
    }
    Ok(Constellation { points, kind })
}

pub fn mu4(c: &Constellation) -> f64 {
    c.points.iter().map(|p| p.norm_sqr().powi(2)).sum::<f64>() / c.points.len() as f64
}

/// Data symbols of one frame: `N` subcarriers (rows) by `M` symbols (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame {
    pub s: CMatrix,
}

impl SymbolFrame {
    pub fn nrows(&self) -> usize {
        self.s.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.s.ncols()
    }

    /// Dumps the frame as CSV: one row per subcarrier, entries as `re+imj`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for n in 0..self.s.nrows() {
            let row: Vec<String> = (0..self.s.ncols()).map(|m| format_complex(self.s[(n, m)])).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn format_complex(z: Complex64) -> String {
    if z.im < 0.0 || (z.im == 0.0 && z.im.is_sign_negative()) {
        format!("{}-{}j", z.re, -z.im)
    } else {
        format!("{}+{}j", z.re, z.im)
    }
}

/// Draws an `N x M` frame of i.i.d. uniformly chosen constellation points.
pub fn gen_frame<R: Rng + ?Sized>(cfg: &ScenarioConfig, c: &Constellation, rng: &mut R) -> SymbolFrame {
    gen_frame_dims(cfg.n, cfg.m, c, rng)
}

pub fn gen_frame_dims<R: Rng + ?Sized>(n: usize, m: usize, c: &Constellation, rng: &mut R) -> SymbolFrame {
    let order = c.points.len();
    let s = CMatrix::from_fn(n, m, |_, _| c.points[rng.random_range(0..order)]);
    SymbolFrame { s }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(c: &Constellation) -> (Complex64, Complex64, f64) {
        let k = c.points.len() as f64;
        let mean = c.points.iter().sum::<Complex64>() / k;
        let pseudo = c.points.iter().map(|p| p * p).sum::<Complex64>() / k;
        let power = c.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / k;
        (mean, pseudo, power)
    }

    #[test]
    fn every_supported_alphabet_is_normalized() {
        for kind in ConstellationKind::SUPPORTED {
            let c = make_constellation(kind).unwrap();
            assert_eq!(c.order(), kind.order());
            let (mean, pseudo, power) = moments(&c);
            assert!(mean.norm() < 1e-12, "{kind}");
            assert!(pseudo.norm() < 1e-12, "{kind}");
            assert!((power - 1.0).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn qpsk_is_constant_modulus() {
        let c = make_constellation(ConstellationKind::Qpsk).unwrap();
        assert_eq!(c.order(), 4);
        assert!(c.points.iter().all(|p| (p.norm() - 1.0).abs() < 1e-15));
        assert!((mu4(&c) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fourth_moments() {
        // Brute-force means over the normalized alphabets, computed offline.
        let golden = [
            (ConstellationKind::Qam16, 1.32),
            (ConstellationKind::Qam64, 1.3809523809523816),
            (ConstellationKind::Qam256, 1.3952941176470584),
            (ConstellationKind::Qam1024, 1.3988269794721404),
        ];
        for (kind, want) in golden {
            let got = mu4(&make_constellation(kind).unwrap());
            assert!((got - want).abs() < 1e-12, "{kind}: {got}");
        }
        let m1024 = mu4(&make_constellation(ConstellationKind::Qam1024).unwrap());
        assert!(m1024 > 1.0 && m1024 < 1.4);
    }

    #[test]
    fn rejects_unsupported() {
        assert!(make_constellation(ConstellationKind::Bpsk).is_err());
        assert!(make_constellation(ConstellationKind::Qam8).is_err());
        assert!("32QAM".parse::<ConstellationKind>().is_err());
        assert_eq!("1024-qam".parse::<ConstellationKind>().unwrap(), ConstellationKind::Qam1024);
    }

    #[test]
    fn frames_are_reproducible() {
        let cfg = ScenarioConfig::table_i();
        let c = make_constellation(cfg.constellation).unwrap();
        let a = gen_frame(&cfg, &c, &mut ChaCha8Rng::seed_from_u64(9));
        let b = gen_frame(&cfg, &c, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!((a.nrows(), a.ncols()), (128, 64));
        let one = gen_frame_dims(1, 1, &c, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(c.points.contains(&one.s[(0, 0)]));
    }

    #[test]
    fn frame_marginals_converge() {
        // 10^4 frames of 128 x 64: the law of large numbers leaves far less
        // than the 1% / 2% slack at this sample size.
        let c = make_constellation(ConstellationKind::Qam1024).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (mut p2, mut p4, mut count) = (0.0, 0.0, 0usize);
        for _ in 0..10_000 {
            let f = gen_frame_dims(128, 64, &c, &mut rng);
            for z in f.s.iter() {
                let a = z.norm_sqr();
                p2 += a;
                p4 += a * a;
            }
            count += f.s.len();
        }
        p2 /= count as f64;
        p4 /= count as f64;
        assert!((p2 - 1.0).abs() < 0.01, "{p2}");
        assert!((p4 / mu4(&c) - 1.0).abs() < 0.02, "{p4}");
    }

    #[test]
    fn csv_dump() {
        let s = CMatrix::from_row_slice(2, 2, &[
            Complex64::new(1.0, -1.0), Complex64::new(0.5, 2.0),
            Complex64::new(0.0, 0.0), Complex64::new(-1.0, 1.0),
        ]);
        let mut buf = Vec::new();
        SymbolFrame { s }.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1-1j,0.5+2j\n0+0j,-1+1j\n");
    }
}
