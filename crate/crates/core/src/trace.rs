//! Uniformly sampled frequency-offset traces and their CSV form.
//!
//! The carrier is kept as an exact integer number of hertz; samples are
//! offsets from it. At 2×10¹⁴ Hz an `f64` alone resolves only ~0.03 Hz, so
//! the split is what keeps sub-Hz detail alive on optical carriers.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTrace {
    pub nominal_hz: u64,
    pub dt: f64,
    pub samples: Vec<f64>,
    pub seed: u64,
}

impl FrequencyTrace {
    pub fn new(nominal_hz: u64, dt: f64, samples: Vec<f64>, seed: u64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return param(format!("trace dt must be positive, got {dt}"));
        }
        if samples.is_empty() {
            return param("trace must contain at least one sample");
        }
        Ok(Self {
            nominal_hz,
            dt,
            samples,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.dt
    }

    /// Sample times `k·dt`.
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.samples.len()).map(move |k| k as f64 * self.dt)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# nominal_hz={} dt={} seed={}",
            self.nominal_hz,
            fmt_float(self.dt),
            self.seed
        )?;
        let mut buf = String::with_capacity(self.samples.len() * 24);
        for s in &self.samples {
            let _ = writeln!(buf, "{}", fmt_float(*s));
        }
        w.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trace file".into()))??;
        let fields = parse_header(&header)?;
        let nominal_hz = header_u64(&fields, "nominal_hz")?;
        let dt = header_f64(&fields, "dt")?;
        let seed = header_u64(&fields, "seed")?;
        let samples = parse_values(lines)?;
        Self::new(nominal_hz, dt, samples, seed)
    }
}

/// Floats in artifacts: 17 significant digits, which round-trips any `f64`.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn parse_header(line: &str) -> Result<Vec<(String, String)>> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::Parse(format!("expected '#' header line, got {line:?}")))?;
    body.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Parse(format!("malformed header field {kv:?}")))
        })
        .collect()
}

fn header_value<'a>(fields: &'a [(String, String)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Parse(format!("header is missing {key}")))
}

pub(crate) fn header_u64(fields: &[(String, String)], key: &str) -> Result<u64> {
    let v = header_value(fields, key)?;
    v.parse()
        .map_err(|_| Error::Parse(format!("header {key}={v} is not an unsigned integer")))
}

pub(crate) fn header_f64(fields: &[(String, String)], key: &str) -> Result<f64> {
    let v = header_value(fields, key)?;
    v.parse()
        .map_err(|_| Error::Parse(format!("header {key}={v} is not a number")))
}

pub(crate) fn parse_values<I>(lines: I) -> Result<Vec<f64>>
where
    I: Iterator<Item = std::io::Result<String>>,
{
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: {t:?} is not a number", i + 2)))?;
        out.push(v);
    }
    Ok(out)
}

/// splitmix64 step; derives independent sub-seeds from one scenario seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
