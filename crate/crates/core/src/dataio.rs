//! Dataset plumbing: ASCII PLY, synthetic primitives with analytic
//! keypoints, and TOML dataset manifests.
//!
//! Accepted PLY subset:
//!
//! ```text
//! ply
//! format ascii 1.0
//! (comment ... | obj_info ...)*
//! element vertex <N>
//! property (float|double|float32|float64) x
//! property (float|double|float32|float64) y
//! property (float|double|float32|float64) z
//! end_header
//! <N lines of three numbers>
//! ```
//!
//! Blank trailing lines are ignored; anything else after the vertices is an
//! error.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, KeypointSet, Point3, PointCloud};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        msg: msg.into(),
    }
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next = |what: &str| lines.next().ok_or_else(|| parse_err(path, 0, format!("unexpected end of file, expected {what}")));

    let (ln, l) = next("magic")?;
    if l != "ply" {
        return Err(parse_err(path, ln, "missing 'ply' magic"));
    }
    let (ln, l) = next("format")?;
    if l != "format ascii 1.0" {
        return Err(parse_err(path, ln, format!("unsupported format line {l:?}")));
    }
    let (mut ln, mut l) = next("element")?;
    while l.starts_with("comment") || l.starts_with("obj_info") {
        (ln, l) = next("element")?;
    }
    let count: usize = match l.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["element", "vertex", n] => n.parse().map_err(|_| parse_err(path, ln, format!("bad vertex count {n:?}")))?,
        _ => return Err(parse_err(path, ln, format!("expected 'element vertex N', got {l:?}"))),
    };
    for axis in ["x", "y", "z"] {
        let (ln, l) = next("property")?;
        match l.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["property", ty, name] if *name == axis => {
                if !matches!(*ty, "float" | "double" | "float32" | "float64") {
                    return Err(parse_err(path, ln, format!("property {axis} has non-float type {ty}")));
                }
            }
            _ => return Err(parse_err(path, ln, format!("expected float property {axis}, got {l:?}"))),
        }
    }
    let (ln, l) = next("end_header")?;
    if l != "end_header" {
        return Err(parse_err(path, ln, format!("expected end_header, got {l:?}")));
    }
    let mut points = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let (ln, l) = next("vertex")?;
        let vals: Vec<&str> = l.split_whitespace().collect();
        if vals.len() != 3 {
            return Err(parse_err(path, ln, format!("expected 3 coordinates, got {}", vals.len())));
        }
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = vals[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, ln, format!("bad coordinate {:?}", vals[k])))?;
        }
        points.push(p);
    }
    for (ln, l) in lines {
        if !l.is_empty() {
            return Err(parse_err(path, ln, "data after the last vertex"));
        }
    }
    Ok(PointCloud::new(points))
}

pub fn load_ply(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}

/// Nine significant digits, shortest of fixed or exponent notation.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    let s = if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.8e}")
    };
    if s.contains('.') && !s.contains('e') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn ply_string(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in &cloud.points {
        let _ = writeln!(out, "{} {} {}", format_sig9(p[0]), format_sig9(p[1]), format_sig9(p[2]));
    }
    out
}

pub fn save_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    std::fs::write(path, ply_string(cloud)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Box,
    Cylinder,
    Torus,
    Cone,
    Lshape,
}

impl ShapeFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Box => "box",
            Self::Cylinder => "cylinder",
            Self::Torus => "torus",
            Self::Cone => "cone",
            Self::Lshape => "lshape",
        }
    }

    pub fn keypoint_count(self) -> usize {
        match self {
            Self::Box | Self::Cylinder | Self::Torus => 8,
            Self::Cone => 5,
            Self::Lshape => 12,
        }
    }
}

impl std::str::FromStr for ShapeFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "box" => Self::Box,
            "cylinder" => Self::Cylinder,
            "torus" => Self::Torus,
            "cone" => Self::Cone,
            "lshape" => Self::Lshape,
            other => return Err(Error::invalid(format!("unknown shape family {other:?}"))),
        })
    }
}

/// A primitive with its size parameters.
///
/// `size` meaning per family: box `[x, y, z]` extents; cylinder and cone
/// `[radius, height, -]`; torus `[major, minor, -]`; lshape
/// `[arm length, arm width, thickness]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticShapeSpec {
    pub family: ShapeFamily,
    pub size: [f64; 3],
    pub n_points: usize,
}

impl SyntheticShapeSpec {
    /// Sizes drawn from family-specific ranges.
    pub fn random<R: Rng + ?Sized>(family: ShapeFamily, n_points: usize, rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let size = match family {
            ShapeFamily::Box => [u(0.6, 1.6), u(0.6, 1.6), u(0.6, 1.6)],
            ShapeFamily::Cylinder => [u(0.3, 0.6), u(0.8, 2.0), 0.0],
            ShapeFamily::Torus => [u(0.6, 1.0), u(0.15, 0.35), 0.0],
            ShapeFamily::Cone => [u(0.4, 0.8), u(0.8, 1.8), 0.0],
            ShapeFamily::Lshape => {
                let a = u(1.0, 1.6);
                [a, u(0.3, 0.5) * a, u(0.2, 0.5)]
            }
        };
        Self { family, size, n_points }
    }

    pub fn validate(&self) -> Result<()> {
        let used = match self.family {
            ShapeFamily::Box | ShapeFamily::Lshape => 3,
            _ => 2,
        };
        if self.size[..used].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("{} size parameters must be positive", self.family.name())));
        }
        if self.family == ShapeFamily::Torus && self.size[1] >= self.size[0] {
            return Err(Error::invalid("torus minor radius must be below the major radius"));
        }
        if self.family == ShapeFamily::Lshape && self.size[1] >= self.size[0] {
            return Err(Error::invalid("lshape arm width must be below the arm length"));
        }
        if self.n_points < 8 * self.family.keypoint_count() {
            return Err(Error::invalid(format!(
                "{} needs at least {} points",
                self.family.name(),
                8 * self.family.keypoint_count()
            )));
        }
        Ok(())
    }

    /// Analytic keypoints in the shape's own frame.
    pub fn keypoints(&self) -> Vec<Point3> {
        let [a, b, c] = self.size;
        match self.family {
            ShapeFamily::Box => {
                let mut v = Vec::new();
                for sx in [-1.0, 1.0] {
                    for sy in [-1.0, 1.0] {
                        for sz in [-1.0, 1.0] {
                            v.push([sx * a / 2.0, sy * b / 2.0, sz * c / 2.0]);
                        }
                    }
                }
                v
            }
            ShapeFamily::Cylinder => {
                let mut v = Vec::new();
                for z in [-b / 2.0, b / 2.0] {
                    v.extend([[a, 0.0, z], [0.0, a, z], [-a, 0.0, z], [0.0, -a, z]]);
                }
                v
            }
            ShapeFamily::Torus => {
                let mut v = Vec::new();
                for r in [a + b, a - b] {
                    v.extend([[r, 0.0, 0.0], [0.0, r, 0.0], [-r, 0.0, 0.0], [0.0, -r, 0.0]]);
                }
                v
            }
            ShapeFamily::Cone => vec![[0.0, 0.0, b], [a, 0.0, 0.0], [0.0, a, 0.0], [-a, 0.0, 0.0], [0.0, -a, 0.0]],
            ShapeFamily::Lshape => {
                let poly = [[0.0, 0.0], [a, 0.0], [a, b], [b, b], [b, a], [0.0, a]];
                let mut v = Vec::new();
                for z in [0.0, c] {
                    v.extend(poly.iter().map(|p| [p[0], p[1], z]));
                }
                v
            }
        }
    }

    fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> Point3 {
        let [a, b, c] = self.size;
        let tau = std::f64::consts::TAU;
        match self.family {
            ShapeFamily::Box => {
                let faces = [b * c, a * c, a * b];
                let k = pick(&faces, rng);
                let mut p = [rng.gen_range(-a / 2.0..a / 2.0), rng.gen_range(-b / 2.0..b / 2.0), rng.gen_range(-c / 2.0..c / 2.0)];
                let half = [a / 2.0, b / 2.0, c / 2.0];
                p[k] = if rng.gen::<bool>() { half[k] } else { -half[k] };
                p
            }
            ShapeFamily::Cylinder => {
                let (r, h) = (a, b);
                let parts = [tau * r * h, std::f64::consts::PI * r * r, std::f64::consts::PI * r * r];
                let th = rng.gen_range(0.0..tau);
                match pick(&parts, rng) {
                    0 => [r * th.cos(), r * th.sin(), rng.gen_range(-h / 2.0..h / 2.0)],
                    k => {
                        let rr = r * rng.gen::<f64>().sqrt();
                        [rr * th.cos(), rr * th.sin(), if k == 1 { -h / 2.0 } else { h / 2.0 }]
                    }
                }
            }
            ShapeFamily::Torus => loop {
                let (u, v) = (rng.gen_range(0.0..tau), rng.gen_range(0.0..tau));
                // Area element is proportional to R + r cos v.
                if rng.gen::<f64>() * (a + b) <= a + b * v.cos() {
                    let ring = a + b * v.cos();
                    break [ring * u.cos(), ring * u.sin(), b * v.sin()];
                }
            },
            ShapeFamily::Cone => {
                let (r, h) = (a, b);
                let slant = (r * r + h * h).sqrt();
                let parts = [std::f64::consts::PI * r * slant, std::f64::consts::PI * r * r];
                let th = rng.gen_range(0.0..tau);
                let s = rng.gen::<f64>().sqrt();
                match pick(&parts, rng) {
                    // Distance from apex grows with sqrt of a uniform draw.
                    0 => [s * r * th.cos(), s * r * th.sin(), h * (1.0 - s)],
                    _ => [s * r * th.cos(), s * r * th.sin(), 0.0],
                }
            }
            ShapeFamily::Lshape => {
                let (l, w, t) = (a, b, c);
                // Caps: two rectangles per cap. Sides: six walls of the outline.
                let walls = [l, w, l - w, l - w, w, l];
                let cap = [l * w, w * (l - w)];
                let mut parts = vec![cap[0], cap[1], cap[0], cap[1]];
                parts.extend(walls.iter().map(|len| len * t));
                let k = pick(&parts, rng);
                let (x, y) = (rng.gen::<f64>(), rng.gen::<f64>());
                match k {
                    0 | 2 => [x * l, y * w, if k == 0 { 0.0 } else { t }],
                    1 | 3 => [x * w, w + y * (l - w), if k == 1 { 0.0 } else { t }],
                    _ => {
                        let poly = [[0.0, 0.0], [l, 0.0], [l, w], [w, w], [w, l], [0.0, l]];
                        let i = k - 4;
                        let (p, q) = (poly[i], poly[(i + 1) % 6]);
                        [p[0] + x * (q[0] - p[0]), p[1] + x * (q[1] - p[1]), y * t]
                    }
                }
            }
        }
    }
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// A generated cloud with its keypoints and the normalization applied
/// (`shape frame = cloud * scale + centroid`).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShape {
    pub cloud: PointCloud,
    pub keypoints: KeypointSet,
    pub centroid: Point3,
    pub scale: f64,
}

/// Surface samples plus the analytic keypoints (as actual points), shuffled
/// and normalized to the unit sphere.
pub fn gen_synthetic<R: Rng + ?Sized>(spec: &SyntheticShapeSpec, rng: &mut R) -> Result<SyntheticShape> {
    spec.validate()?;
    let kps = spec.keypoints();
    let mut tagged: Vec<(Point3, Option<usize>)> = kps.iter().enumerate().map(|(i, p)| (*p, Some(i))).collect();
    while tagged.len() < spec.n_points {
        tagged.push((spec.sample_surface(rng), None));
    }
    tagged.shuffle(rng);
    let mut indices = vec![0; kps.len()];
    for (pos, (_, tag)) in tagged.iter().enumerate() {
        if let Some(k) = tag {
            indices[*k] = pos;
        }
    }
    let raw = PointCloud::with_meta(tagged.into_iter().map(|(p, _)| p).collect(), "", spec.family.name());
    let (cloud, centroid, scale) = normalize_unit_sphere(&raw)?;
    Ok(SyntheticShape {
        cloud,
        keypoints: KeypointSet::new(indices),
        centroid,
        scale,
    })
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub class_label: String,
    /// Relative paths resolve against the manifest's directory.
    pub cloud_path: PathBuf,
    pub keypoint_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// One training or evaluation item.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub keypoints: KeypointSet,
}

impl DatasetManifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            entries: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.cloud_path.is_absolute() {
            entry.cloud_path.clone()
        } else {
            self.base_dir.join(&entry.cloud_path)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<Sample> {
        let merr = |msg: String| Error::Manifest {
            entry: entry.id.clone(),
            msg,
        };
        let mut cloud = load_ply(&self.resolve(entry)).map_err(|e| merr(e.to_string()))?;
        cloud.id = entry.id.clone();
        cloud.class_label = entry.class_label.clone();
        let keypoints = KeypointSet::new(entry.keypoint_indices.clone());
        keypoints.validate(cloud.len()).map_err(|e| merr(e.to_string()))?;
        cloud.validate().map_err(|e| merr(e.to_string()))?;
        Ok(Sample { cloud, keypoints })
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries.iter().map(|e| self.load_entry(e)).collect()
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let mut m: DatasetManifest = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
        parse_err(path, line, e.message().to_string())
    })?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(m)
}

/// Parses and validates.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = parse_manifest(&text, path)?;
    validate_manifest(&m)?;
    Ok(m)
}

/// Checks version, unique ids, resolvable clouds and keypoint ranges.
pub fn validate_manifest(m: &DatasetManifest) -> Result<()> {
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::Manifest {
            entry: "<header>".into(),
            msg: format!("format_version {} unsupported (expected {MANIFEST_VERSION})", m.format_version),
        });
    }
    let mut ids = HashSet::new();
    for e in &m.entries {
        if !ids.insert(e.id.as_str()) {
            return Err(Error::Manifest {
                entry: e.id.clone(),
                msg: "duplicate id".into(),
            });
        }
        m.load_entry(e)?;
    }
    Ok(())
}

/// Class list and split sizes of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetConfig {
    pub classes: Vec<ShapeFamily>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub n_points: usize,
}

impl SyntheticDatasetConfig {
    pub fn paper() -> Self {
        Self {
            classes: vec![ShapeFamily::Box, ShapeFamily::Cylinder, ShapeFamily::Torus, ShapeFamily::Cone, ShapeFamily::Lshape],
            train_per_class: 200,
            test_per_class: 50,
            n_points: 1024,
        }
    }

    pub fn toy() -> Self {
        Self {
            classes: vec![ShapeFamily::Box, ShapeFamily::Cylinder, ShapeFamily::Cone],
            train_per_class: 64,
            test_per_class: 20,
            n_points: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.train_per_class + self.test_per_class == 0 {
            return Err(Error::config("dataset needs at least one class and one cloud"));
        }
        for f in &self.classes {
            if self.n_points < 8 * f.keypoint_count() {
                return Err(Error::config(format!("n_points too small for {}", f.name())));
            }
        }
        Ok(())
    }
}

/// Train and test samples of a generated dataset, ids `<split>-<class>-<k>`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Each cloud draws from its own stream of `seed`, so any single cloud can
/// be regenerated without the others.
pub fn gen_dataset(cfg: &SyntheticDatasetConfig, seed: u64) -> Result<SyntheticDataset> {
    use rand::SeedableRng;
    cfg.validate()?;
    let split = |name: &str, per_class: usize, offset: u64| -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for (c, family) in cfg.classes.iter().enumerate() {
            for k in 0..per_class {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(offset + (c * per_class + k) as u64);
                let spec = SyntheticShapeSpec::random(*family, cfg.n_points, &mut rng);
                let shape = gen_synthetic(&spec, &mut rng)?;
                let mut cloud = shape.cloud;
                cloud.id = format!("{name}-{}-{k:04}", family.name());
                out.push(Sample {
                    cloud,
                    keypoints: shape.keypoints,
                });
            }
        }
        Ok(out)
    };
    Ok(SyntheticDataset {
        train: split("train", cfg.train_per_class, 0)?,
        test: split("test", cfg.test_per_class, 1 << 32)?,
    })
}

/// Writes `clouds/<id>.ply` plus `train.toml` and `test.toml` under `dir`.
pub fn write_dataset(dataset: &SyntheticDataset, dir: &Path) -> Result<()> {
    let clouds = dir.join("clouds");
    std::fs::create_dir_all(&clouds).map_err(|e| Error::io(&clouds, e))?;
    for (name, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
        let mut m = DatasetManifest::new(dir);
        for s in samples {
            let rel = PathBuf::from("clouds").join(format!("{}.ply", s.cloud.id));
            save_ply(&s.cloud, &dir.join(&rel))?;
            m.entries.push(ManifestEntry {
                id: s.cloud.id.clone(),
                class_label: s.cloud.class_label.clone(),
                cloud_path: rel,
                keypoint_indices: s.keypoints.indices.clone(),
            });
        }
        m.write(&dir.join(format!("{name}.toml")))?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct KpnetKeypoint {
    pcd_info: KpnetPcdInfo,
}

#[derive(Debug, Deserialize)]
struct KpnetPcdInfo {
    point_index: usize,
}

#[derive(Debug, Deserialize)]
struct KpnetAnnotation {
    class_id: String,
    model_id: String,
    keypoints: Vec<KpnetKeypoint>,
}

/// Converts KeypointNet-style JSON annotations into a manifest whose clouds
/// live at `<cloud_dir>/<class_id>/<model_id>.ply`. Duplicate keypoint
/// indices collapse.
pub fn keypointnet_manifest(json: &str, cloud_dir: &Path, base_dir: &Path) -> Result<DatasetManifest> {
    let annotations: Vec<KpnetAnnotation> =
        serde_json::from_str(json).map_err(|e| parse_err(Path::new("<keypointnet json>"), e.line(), e.to_string()))?;
    let mut m = DatasetManifest::new(base_dir);
    for a in annotations {
        let mut idx: Vec<usize> = Vec::new();
        for k in &a.keypoints {
            if !idx.contains(&k.pcd_info.point_index) {
                idx.push(k.pcd_info.point_index);
            }
        }
        m.entries.push(ManifestEntry {
            id: format!("{}_{}", a.class_id, a.model_id),
            class_label: a.class_id.clone(),
            cloud_path: cloud_dir.join(&a.class_id).join(format!("{}.ply", a.model_id)),
            keypoint_indices: idx,
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::denormalize;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const THREE: &str = "ply\nformat ascii 1.0\ncomment hand\nelement vertex 3\nproperty float x\nproperty float y\nproperty double z\nend_header\n0 0 0\n1 2 3\n-1.5 0.25 1e-3\n";

    #[test]
    fn hand_written_file() {
        let c = parse_ply(THREE, Path::new("t.ply")).unwrap();
        assert_eq!(c.points, vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-1.5, 0.25, 1e-3]]);
    }

    #[test]
    fn malformed_files_report_lines() {
        let p = Path::new("bad.ply");
        let missing_z = THREE.replace("property double z\n", "");
        assert!(matches!(parse_ply(&missing_z, p), Err(Error::Parse { line: 7, .. })));
        let int_type = THREE.replace("property float y", "property int y");
        assert!(matches!(parse_ply(&int_type, p), Err(Error::Parse { line: 6, .. })));
        let truncated = THREE.trim_end().rsplit_once('\n').unwrap().0.to_string();
        assert!(matches!(parse_ply(&truncated, p), Err(Error::Parse { .. })));
        let short_row = THREE.replace("1 2 3", "1 2");
        assert!(matches!(parse_ply(&short_row, p), Err(Error::Parse { line: 10, .. })));
        let extra = format!("{THREE}4 5 6\n");
        assert!(matches!(parse_ply(&extra, p), Err(Error::Parse { line: 12, .. })));
        let binary = THREE.replace("ascii", "binary_little_endian");
        assert!(matches!(parse_ply(&binary, p), Err(Error::Parse { line: 2, .. })));
        assert!(parse_ply("", p).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(-0.123456789123), "-0.123456789");
        assert_eq!(format_sig9(12345.6789012), "12345.6789");
        assert_eq!(format_sig9(1.5e-7), "1.50000000e-7");
    }

    #[test]
    fn empty_cloud_and_determinism() {
        let s = ply_string(&PointCloud::new(vec![]));
        assert!(s.contains("element vertex 0"));
        assert!(parse_ply(&s, Path::new("e.ply")).unwrap().is_empty());
        let c = PointCloud::new(vec![[0.1, 0.2, 0.3]]);
        assert_eq!(ply_string(&c), ply_string(&c));
    }

    proptest! {
        #[test]
        fn ply_round_trip(pts in proptest::collection::vec(proptest::array::uniform3(-1e3f64..1e3), 0..40)) {
            let c = PointCloud::new(pts);
            let back = parse_ply(&ply_string(&c), Path::new("r.ply")).unwrap();
            prop_assert_eq!(back.len(), c.len());
            for (a, b) in back.points.iter().zip(&c.points) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() <= 1e-6 * b[k].abs().max(1.0));
                }
            }
        }

        #[test]
        fn mutated_ply_never_panics(cut in 0usize..140, byte in any::<u8>()) {
            let mut b = THREE.as_bytes().to_vec();
            let i = cut % b.len();
            b[i] = byte;
            let text = String::from_utf8_lossy(&b);
            let _ = parse_ply(&text, Path::new("m.ply"));
        }
    }

    #[test]
    fn synthetic_keypoints_are_points() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for family in [ShapeFamily::Box, ShapeFamily::Cylinder, ShapeFamily::Torus, ShapeFamily::Cone, ShapeFamily::Lshape] {
            let spec = SyntheticShapeSpec::random(family, 256, &mut r);
            let s = gen_synthetic(&spec, &mut r).unwrap();
            assert_eq!(s.cloud.len(), 256);
            assert_eq!(s.keypoints.len(), family.keypoint_count());
            s.keypoints.validate(256).unwrap();
            let c = s.cloud.centroid();
            assert!(c.iter().all(|v| v.abs() < 1e-12));
            let max = s.cloud.points.iter().map(|p| crate::geometry::dist2(p, &[0.0; 3]).sqrt()).fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
            let back = denormalize(&s.cloud, s.centroid, s.scale);
            for (k, idx) in s.keypoints.indices.iter().enumerate() {
                let want = spec.keypoints()[k];
                assert!((0..3).all(|a| (back.points[*idx][a] - want[a]).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn box_and_cylinder_rules() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let spec = SyntheticShapeSpec { family: ShapeFamily::Box, size: [1.0, 1.0, 1.0], n_points: 256 };
        let s = gen_synthetic(&spec, &mut r).unwrap();
        assert_eq!(s.keypoints.len(), 8);
        let cyl = SyntheticShapeSpec { family: ShapeFamily::Cylinder, size: [0.5, 1.0, 0.0], n_points: 256 };
        assert_eq!(cyl.keypoints().len(), 8);
        assert!(cyl.keypoints().iter().all(|p| (p[0].hypot(p[1]) - 0.5).abs() < 1e-12 && p[2].abs() == 0.5));
        let tiny = SyntheticShapeSpec { n_points: 40, ..spec };
        assert!(gen_synthetic(&tiny, &mut r).is_err());
    }

    #[test]
    fn seeds_vary_samples_not_keypoints() {
        let spec = SyntheticShapeSpec { family: ShapeFamily::Cone, size: [0.5, 1.2, 0.0], n_points: 128 };
        let a = gen_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = gen_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a2 = gen_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a.cloud, b.cloud);
        let kp = |s: &SyntheticShape| {
            let back = denormalize(&s.cloud, s.centroid, s.scale);
            s.keypoints.indices.iter().map(|&i| back.points[i]).collect::<Vec<_>>()
        };
        for (p, q) in kp(&a).iter().zip(kp(&b)) {
            assert!((0..3).all(|k| (p[k] - q[k]).abs() < 1e-9));
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        save_ply(&cloud, &dir.path().join("a.ply")).unwrap();
        let mut m = DatasetManifest::new(dir.path());
        m.entries.push(ManifestEntry {
            id: "a".into(),
            class_label: "box".into(),
            cloud_path: "a.ply".into(),
            keypoint_indices: vec![2],
        });
        let path = dir.path().join("m.toml");
        m.write(&path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.load_samples().unwrap()[0].cloud.class_label, "box");

        m.entries[0].keypoint_indices = vec![3];
        m.write(&path).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Manifest { entry, .. }) if entry == "a"));
        m.entries[0].keypoint_indices = vec![0];
        m.entries[0].cloud_path = "missing.ply".into();
        m.write(&path).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Manifest { .. })));
        std::fs::write(&path, "format_version = 2\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Manifest { .. })));
        std::fs::write(&path, "format_version = 1\nbogus = 3\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn dataset_is_reproducible_and_reloads() {
        let cfg = SyntheticDatasetConfig {
            train_per_class: 2,
            test_per_class: 1,
            n_points: 128,
            ..SyntheticDatasetConfig::toy()
        };
        let a = gen_dataset(&cfg, 5).unwrap();
        assert_eq!(a, gen_dataset(&cfg, 5).unwrap());
        assert_eq!((a.train.len(), a.test.len()), (6, 3));
        assert_ne!(a.train[0].cloud, a.train[1].cloud);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&a, dir.path()).unwrap();
        let back = load_manifest(&dir.path().join("test.toml")).unwrap().load_samples().unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].keypoints, a.test[0].keypoints);
        assert_eq!(back[0].cloud.id, a.test[0].cloud.id);
        let first = std::fs::read(dir.path().join("train.toml")).unwrap();
        write_dataset(&a, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join("train.toml")).unwrap());
    }

    #[test]
    fn keypointnet_adapter() {
        let json = r#"[{"class_id": "03001627", "model_id": "m1",
            "keypoints": [{"xyz": [0,0,0], "semantic_id": 0, "pcd_info": {"point_index": 5}},
                          {"xyz": [0,1,0], "semantic_id": 1, "pcd_info": {"point_index": 5}},
                          {"xyz": [1,0,0], "semantic_id": 2, "pcd_info": {"point_index": 9}}]}]"#;
        let m = keypointnet_manifest(json, Path::new("pcds"), Path::new("/data")).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].keypoint_indices, vec![5, 9]);
        assert_eq!(m.resolve(&m.entries[0]), Path::new("/data/pcds/03001627/m1.ply"));
        assert!(keypointnet_manifest("{", Path::new("p"), Path::new("b")).is_err());
    }
}
