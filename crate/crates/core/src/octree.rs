//! Classical baseline: octree geometry coding sent over a digital link.
//!
//! Occupancy bytes are emitted breadth-first, one per occupied internal
//! node. Child `k` of a node is `x * 4 + y * 2 + z` (one bit per axis, `x`
//! most significant) and sets bit `k` of the parent's byte. Leaves decode to
//! voxel centers.
//!
//! File layout (little endian): `"OCT1"`, depth `u8`, min corner and edge as
//! four `f64`, then the occupancy bytes up to end of file.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::metrics::MetricReport;

pub const MAGIC: &[u8; 4] = b"OCT1";
pub const HEADER_LEN: usize = 4 + 1 + 4 * 8;
pub const MAX_DEPTH: u8 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct OctreeBitstream {
    pub depth: u8,
    pub min: Point3,
    pub edge: f64,
    pub occupancy: Vec<u8>,
}

/// Why a stream could not be decoded. A modeled outcome of the baseline,
/// not a program error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeFailure {
    BadHeader,
    Truncated,
    Overlong,
    /// An internal node byte with no children.
    EmptyNode,
}

impl std::fmt::Display for DecodeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BadHeader => "bad header",
            Self::Truncated => "truncated stream",
            Self::Overlong => "trailing bytes",
            Self::EmptyNode => "empty internal node",
        })
    }
}

fn morton(ix: [u64; 3], depth: u8) -> u64 {
    let mut code = 0;
    for level in (0..depth).rev() {
        let child = ((ix[0] >> level) & 1) << 2 | ((ix[1] >> level) & 1) << 1 | ((ix[2] >> level) & 1);
        code = code << 3 | child;
    }
    code
}

impl OctreeBitstream {
    pub fn encode(cloud: &PointCloud, depth: u8) -> Result<Self> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::invalid(format!("octree depth {depth} outside 1..={MAX_DEPTH}")));
        }
        cloud.validate()?;
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &cloud.points {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let extent = (0..3).map(|k| max[k] - min[k]).fold(0.0, f64::max);
        let edge = if extent > 0.0 { extent } else { 1.0 };
        let cells = 1u64 << depth;
        let leaves: BTreeSet<u64> = cloud
            .points
            .iter()
            .map(|p| {
                let ix = [0, 1, 2].map(|k| (((p[k] - min[k]) / edge * cells as f64).floor() as u64).min(cells - 1));
                morton(ix, depth)
            })
            .collect();
        let mut occupancy = Vec::new();
        for level in 0..depth {
            // Nodes at this level are the distinct prefixes, already in
            // breadth-first order because codes are sorted.
            let shift = 3 * (depth - level - 1) as u32;
            let mut current: Option<(u64, u8)> = None;
            for &code in &leaves {
                let prefix = code >> (shift + 3);
                let child = ((code >> shift) & 7) as u8;
                match current {
                    Some((p, ref mut byte)) if p == prefix => *byte |= 1 << child,
                    _ => {
                        if let Some((_, byte)) = current {
                            occupancy.push(byte);
                        }
                        current = Some((prefix, 1 << child));
                    }
                }
            }
            if let Some((_, byte)) = current {
                occupancy.push(byte);
            }
        }
        Ok(Self {
            depth,
            min,
            edge,
            occupancy,
        })
    }

    pub fn leaf_edge(&self) -> f64 {
        self.edge / 2f64.powi(self.depth as i32)
    }

    /// Leaf voxel coordinates in breadth-first order.
    fn walk(&self) -> std::result::Result<Vec<[u64; 3]>, DecodeFailure> {
        if self.depth == 0 || self.depth > MAX_DEPTH || !(self.edge.is_finite() && self.edge > 0.0) || !self.min.iter().all(|v| v.is_finite()) {
            return Err(DecodeFailure::BadHeader);
        }
        let mut nodes: Vec<[u64; 3]> = vec![[0, 0, 0]];
        let mut pos = 0;
        for _ in 0..self.depth {
            let mut next = Vec::with_capacity(nodes.len() * 2);
            for n in &nodes {
                let byte = *self.occupancy.get(pos).ok_or(DecodeFailure::Truncated)?;
                pos += 1;
                if byte == 0 {
                    return Err(DecodeFailure::EmptyNode);
                }
                for k in 0..8u64 {
                    if byte >> k & 1 == 1 {
                        next.push([n[0] << 1 | k >> 2, n[1] << 1 | (k >> 1 & 1), n[2] << 1 | (k & 1)]);
                    }
                }
            }
            nodes = next;
        }
        if pos != self.occupancy.len() {
            return Err(DecodeFailure::Overlong);
        }
        Ok(nodes)
    }

    pub fn leaf_count(&self) -> std::result::Result<usize, DecodeFailure> {
        self.walk().map(|v| v.len())
    }

    /// One point per occupied leaf, at the voxel center.
    pub fn decode(&self) -> std::result::Result<PointCloud, DecodeFailure> {
        let h = self.leaf_edge();
        let points = self
            .walk()?
            .into_iter()
            .map(|ix| [0, 1, 2].map(|k| self.min[k] + (ix[k] as f64 + 0.5) * h))
            .collect();
        Ok(PointCloud::new(points))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.occupancy.len());
        out.extend_from_slice(MAGIC);
        out.push(self.depth);
        for v in self.min.iter().chain(std::iter::once(&self.edge)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.occupancy);
        out
    }

    /// Parses the header; topology is checked by [`OctreeBitstream::decode`].
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, DecodeFailure> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(DecodeFailure::BadHeader);
        }
        let f = |i: usize| f64::from_le_bytes(bytes[5 + 8 * i..13 + 8 * i].try_into().expect("8 bytes"));
        Ok(Self {
            depth: bytes[4],
            min: [f(0), f(1), f(2)],
            edge: f(3),
            occupancy: bytes[HEADER_LEN..].to_vec(),
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: 0,
            msg: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    #[default]
    Bpsk,
    Qpsk,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Self::Bpsk => 1,
            Self::Qpsk => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Coding {
    None,
    /// Capacity-achieving rate-1/2 code: error-free above threshold, failure below.
    #[default]
    IdealRateHalf,
}

impl Coding {
    pub fn rate(self) -> f64 {
        match self {
            Self::None => 1.0,
            Self::IdealRateHalf => 0.5,
        }
    }
}

macro_rules! parse_enum {
    ($t:ty, $($s:literal => $v:expr),+) => {
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok($v),)+
                    other => Err(Error::invalid(format!("unknown {} {other:?}", stringify!($t)))),
                }
            }
        }
    };
}
parse_enum!(Modulation, "bpsk" => Modulation::Bpsk, "qpsk" => Modulation::Qpsk);
parse_enum!(Coding, "none" => Coding::None, "ideal_rate_half" => Coding::IdealRateHalf, "ideal" => Coding::IdealRateHalf);

impl std::fmt::Display for Modulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bpsk => "bpsk",
            Self::Qpsk => "qpsk",
        })
    }
}

impl std::fmt::Display for Coding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::IdealRateHalf => "ideal_rate_half",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DigitalLinkConfig {
    pub modulation: Modulation,
    pub coding: Coding,
    pub snr_db: f64,
}

/// `Q(x) = erfc(x / sqrt 2) / 2`.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Per-bit error probability `Q(sqrt(2 snr))`; Gray-coded QPSK matches BPSK.
pub fn modulation_ber(_modulation: Modulation, snr_db: f64) -> f64 {
    if snr_db == f64::NEG_INFINITY {
        return 0.5;
    }
    let snr = 10f64.powf(snr_db / 10.0);
    q_function((2.0 * snr).sqrt()).clamp(0.0, 0.5)
}

/// Capacity (bits per use) of the binary-input AWGN channel with antipodal
/// inputs at per-bit SNR `snr_db`, by trapezoidal integration.
pub fn biawgn_capacity(snr_db: f64) -> f64 {
    let snr = 10f64.powf(snr_db / 10.0);
    if snr > 1e4 {
        return 1.0;
    }
    let sigma = (1.0 / (2.0 * snr)).sqrt();
    // y ~ N(1, sigma^2); C = 1 - E[log2(1 + exp(-2 y / sigma^2))]
    let n = 4000;
    let (lo, hi) = (1.0 - 12.0 * sigma, 1.0 + 12.0 * sigma);
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let y = lo + i as f64 * h;
        let pdf = (-(y - 1.0).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let z = -2.0 * y / (sigma * sigma);
        let l = if z > 30.0 { z / std::f64::consts::LN_2 } else { z.exp().ln_1p() / std::f64::consts::LN_2 };
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * pdf * l;
    }
    (1.0 - acc * h).clamp(0.0, 1.0)
}

/// Channel symbols needed for `bits` payload bits.
pub fn symbol_count(bits: usize, cfg: &DigitalLinkConfig) -> usize {
    (bits as f64 / cfg.modulation.bits_per_symbol() as f64 / cfg.coding.rate()).ceil() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinkOutcome {
    Delivered { bytes: Vec<u8>, flipped: usize },
    Failed,
}

/// Uncoded: i.i.d. bit flips at the modulation BER. Ideal code: exact
/// delivery iff capacity reaches the code rate, otherwise failure.
pub fn digital_link<R: Rng + ?Sized>(bytes: &[u8], cfg: &DigitalLinkConfig, rng: &mut R) -> LinkOutcome {
    match cfg.coding {
        Coding::IdealRateHalf => {
            if biawgn_capacity(cfg.snr_db) >= cfg.coding.rate() {
                LinkOutcome::Delivered {
                    bytes: bytes.to_vec(),
                    flipped: 0,
                }
            } else {
                LinkOutcome::Failed
            }
        }
        Coding::None => {
            let p = modulation_ber(cfg.modulation, cfg.snr_db);
            let mut out = bytes.to_vec();
            let mut flipped = 0;
            if p > 0.0 {
                for byte in &mut out {
                    for bit in 0..8 {
                        if rng.gen::<f64>() < p {
                            *byte ^= 1 << bit;
                            flipped += 1;
                        }
                    }
                }
            }
            LinkOutcome::Delivered { bytes: out, flipped }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    /// `Err` when the link or the decoder failed.
    pub reconstruction: std::result::Result<PointCloud, BaselineFailure>,
    pub symbols: usize,
    pub metrics: Option<MetricReport>,
    pub payload_bits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineFailure {
    Link,
    Decode(DecodeFailure),
}

/// Encode, serialize, send every file bit over the link, parse, decode and
/// score against the source.
pub fn baseline_transmit<R: Rng + ?Sized>(
    cloud: &PointCloud,
    depth: u8,
    cfg: &DigitalLinkConfig,
    rng: &mut R,
) -> Result<BaselineOutcome> {
    let stream = OctreeBitstream::encode(cloud, depth)?;
    let bytes = stream.to_bytes();
    let payload_bits = bytes.len() * 8;
    let symbols = symbol_count(payload_bits, cfg);
    let reconstruction = match digital_link(&bytes, cfg, rng) {
        LinkOutcome::Failed => Err(BaselineFailure::Link),
        LinkOutcome::Delivered { bytes, .. } => OctreeBitstream::from_bytes(&bytes)
            .and_then(|s| s.decode())
            .map_err(BaselineFailure::Decode),
    };
    let metrics = match &reconstruction {
        Ok(rec) => Some(MetricReport::compute(cloud, rec)?),
        Err(_) => None,
    };
    Ok(BaselineOutcome {
        reconstruction,
        symbols,
        metrics,
        payload_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corners() -> PointCloud {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push([x, y, z]);
                }
            }
        }
        PointCloud::new(pts)
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-0.5..0.5)]).collect())
    }

    #[test]
    fn single_point_path() {
        let s = OctreeBitstream::encode(&PointCloud::new(vec![[0.2, 0.4, -0.1]]), 5).unwrap();
        assert_eq!(s.occupancy.len(), 5);
        assert!(s.occupancy.iter().all(|b| b.count_ones() == 1));
        assert_eq!(s.decode().unwrap().len(), 1);
    }

    #[test]
    fn corners_at_depth_one() {
        let s = OctreeBitstream::encode(&corners(), 1).unwrap();
        assert_eq!(s.occupancy, vec![0xFF]);
        let d = s.decode().unwrap();
        assert_eq!(d.len(), 8);
        assert_eq!(d.points[0], [0.25, 0.25, 0.25]);
        // child 4 is x high, y low, z low
        assert_eq!(d.points[4], [0.75, 0.25, 0.25]);
        assert_eq!(d.points[1], [0.25, 0.25, 0.75]);
    }

    #[test]
    fn round_trip_error_bound() {
        for depth in [1u8, 3, 8, 12] {
            let c = random_cloud(depth as u64, 300);
            let s = OctreeBitstream::encode(&c, depth).unwrap();
            let d = s.decode().unwrap();
            let bound = s.leaf_edge() * 3f64.sqrt() / 2.0;
            for p in &c.points {
                let best = d.points.iter().map(|q| crate::geometry::dist2(p, q)).fold(f64::INFINITY, f64::min).sqrt();
                assert!(best <= bound * (1.0 + 1e-12), "depth {depth}: {best} > {bound}");
            }
            assert_eq!(s.leaf_count().unwrap(), d.len());
        }
    }

    #[test]
    fn duplicates_collapse_and_size_grows_with_depth() {
        let c = PointCloud::new(vec![[0.0; 3], [0.0; 3], [1.0, 1.0, 1.0]]);
        assert_eq!(OctreeBitstream::encode(&c, 4).unwrap().decode().unwrap().len(), 2);
        let c = random_cloud(9, 500);
        let mut last = 0;
        for depth in 1..=10 {
            let n = OctreeBitstream::encode(&c, depth).unwrap().occupancy.len();
            assert!(n >= last);
            last = n;
        }
        assert!(OctreeBitstream::encode(&c, 0).is_err());
        assert!(OctreeBitstream::encode(&c, 17).is_err());
    }

    #[test]
    fn structural_failures() {
        let mut s = OctreeBitstream::encode(&corners(), 2).unwrap();
        let good = s.clone();
        s.occupancy[0] = 0;
        assert_eq!(s.decode(), Err(DecodeFailure::EmptyNode));
        let mut t = good.clone();
        t.occupancy.pop();
        assert_eq!(t.decode(), Err(DecodeFailure::Truncated));
        let mut t = good.clone();
        t.occupancy.push(1);
        assert_eq!(t.decode(), Err(DecodeFailure::Overlong));
        assert_eq!(OctreeBitstream::from_bytes(b"OCT2"), Err(DecodeFailure::BadHeader));
        let mut t = good;
        t.edge = f64::NAN;
        assert_eq!(t.decode(), Err(DecodeFailure::BadHeader));
    }

    #[test]
    fn every_single_bit_flip_is_detected_or_changes_geometry() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.5, 0.2], [0.3, 0.9, 1.0]]);
        let s = OctreeBitstream::encode(&c, 3).unwrap();
        let reference = s.decode().unwrap();
        let bytes = s.to_bytes();
        // The depth byte and the occupancy stream; low mantissa bits of the
        // box can round away.
        let bits = (32..40).chain(HEADER_LEN * 8..bytes.len() * 8);
        for i in bits {
            let mut b = bytes.clone();
            b[i / 8] ^= 1 << (i % 8);
            if let Ok(d) = OctreeBitstream::from_bytes(&b).and_then(|s| s.decode()) {
                assert_ne!(d, reference, "flip {i} went unnoticed");
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.oct");
        let s = OctreeBitstream::encode(&random_cloud(3, 50), 6).unwrap();
        s.write_file(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"OCT1");
        assert_eq!(bytes[4], 6);
        assert_eq!(OctreeBitstream::read_file(&p).unwrap(), s);
    }

    #[test]
    fn ber_values() {
        assert!((modulation_ber(Modulation::Bpsk, 0.0) - 0.0786496).abs() < 1e-4);
        assert_eq!(modulation_ber(Modulation::Qpsk, 3.0), modulation_ber(Modulation::Bpsk, 3.0));
        assert_eq!(modulation_ber(Modulation::Bpsk, f64::NEG_INFINITY), 0.5);
        assert!((modulation_ber(Modulation::Bpsk, -200.0) - 0.5).abs() < 1e-9);
        assert_eq!(modulation_ber(Modulation::Bpsk, 300.0), 0.0);
        // Numerical oracle: Q(sqrt 2) by midpoint integration of the tail.
        let x0 = 2f64.sqrt();
        let h = 1e-5;
        let q: f64 = (0..1_000_000)
            .map(|i| {
                let x = x0 + (i as f64 + 0.5) * h;
                (-x * x / 2.0).exp()
            })
            .sum::<f64>()
            * h
            / (2.0 * std::f64::consts::PI).sqrt();
        assert!((modulation_ber(Modulation::Bpsk, 0.0) - q).abs() < 1e-8);
    }

    #[test]
    fn capacity_threshold() {
        assert!(biawgn_capacity(20.0) > 0.999);
        // Low-SNR slope: C ~ snr * log2(e).
        assert!((biawgn_capacity(-20.0) / (0.01 * std::f64::consts::LOG2_E) - 1.0).abs() < 0.02);
        assert!(biawgn_capacity(-2.6) > 0.5);
        assert!(biawgn_capacity(-3.0) < 0.5);
        let mut last = 0.0;
        for i in -40..40 {
            let c = biawgn_capacity(i as f64 * 0.5);
            assert!(c >= last);
            last = c;
        }
    }

    #[test]
    fn link_behavior() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let bytes = vec![0xA5u8; 64];
        let cfg = |coding, snr_db| DigitalLinkConfig {
            modulation: Modulation::Bpsk,
            coding,
            snr_db,
        };
        assert_eq!(
            digital_link(&bytes, &cfg(Coding::None, 300.0), &mut r),
            LinkOutcome::Delivered { bytes: bytes.clone(), flipped: 0 }
        );
        assert_eq!(digital_link(&bytes, &cfg(Coding::IdealRateHalf, -10.0), &mut r), LinkOutcome::Failed);
        assert!(matches!(
            digital_link(&bytes, &cfg(Coding::IdealRateHalf, 0.0), &mut r),
            LinkOutcome::Delivered { flipped: 0, .. }
        ));
        let big = vec![0u8; 125_000];
        let c = cfg(Coding::None, 2.0);
        let p = modulation_ber(Modulation::Bpsk, 2.0);
        let LinkOutcome::Delivered { flipped, .. } = digital_link(&big, &c, &mut r) else { panic!() };
        let (mean, sd) = (p * 1e6, (1e6 * p * (1.0 - p)).sqrt());
        assert!((flipped as f64 - mean).abs() < 3.0 * sd, "{flipped} vs {mean}");
        assert_eq!(symbol_count(1000, &cfg(Coding::IdealRateHalf, 0.0)), 2000);
        let q = DigitalLinkConfig { modulation: Modulation::Qpsk, coding: Coding::None, snr_db: 0.0 };
        assert_eq!(symbol_count(1001, &q), 501);
    }

    #[test]
    fn baseline_lossless_and_cliff() {
        let c = random_cloud(5, 256);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let cfg = DigitalLinkConfig { modulation: Modulation::Bpsk, coding: Coding::None, snr_db: 300.0 };
        let out = baseline_transmit(&c, 8, &cfg, &mut r).unwrap();
        let s = OctreeBitstream::encode(&c, 8).unwrap();
        let bound = (s.leaf_edge() * 3f64.sqrt() / 2.0).powi(2);
        assert!(out.metrics.unwrap().cd <= bound);
        let again = baseline_transmit(&c, 8, &cfg, &mut r).unwrap();
        assert_eq!(out.symbols, again.symbols);

        let grid = [-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0];
        let ok: Vec<bool> = grid
            .iter()
            .map(|&snr_db| {
                let cfg = DigitalLinkConfig { modulation: Modulation::Bpsk, coding: Coding::IdealRateHalf, snr_db };
                baseline_transmit(&c, 8, &cfg, &mut r).unwrap().reconstruction.is_ok()
            })
            .collect();
        assert_eq!(ok.windows(2).filter(|w| w[0] != w[1]).count(), 1);
        assert!(!ok[0] && ok[7]);
    }
}
