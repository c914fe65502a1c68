//! Volume and landmark files, dataset manifests and the synthetic generator.
//!
//! RVOL layout (little-endian):
//!
//! ```text
//! "RVOL"  u32 version=1  u32 dims[3]  f64 spacing[3]  u8 dtype (0 = f32, 1 = f64)
//! voxel data, x fastest
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Landmark, Space, Volume};
use crate::tensor::{Float, Tensor};

const RVOL_MAGIC: &[u8; 4] = b"RVOL";
const RVOL_VERSION: u32 = 1;
pub const RVOL_HEADER_LEN: usize = 4 + 4 + 12 + 24 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    /// Storage type matching the build's float width.
    pub fn native() -> Self {
        if crate::tensor::FLOAT_BYTES == 4 {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }
}

/// Flat index of `(x, y, z)` in the file's x-fastest order.
fn file_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

pub fn encode_volume(v: &Volume, dtype: Dtype) -> Vec<u8> {
    let dims = v.extents();
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(RVOL_HEADER_LEN + n * dtype.size());
    out.extend_from_slice(RVOL_MAGIC);
    out.extend_from_slice(&RVOL_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&(s as f64).to_le_bytes());
    }
    out.push(dtype.code());
    let data = v.data.data();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let value = data[(x * dims[1] + y) * dims[2] + z];
                match dtype {
                    Dtype::F32 => out.extend_from_slice(&(value as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&(value as f64).to_le_bytes()),
                }
            }
        }
    }
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn le_f64(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

pub fn decode_volume(bytes: &[u8]) -> Result<(Volume, Dtype)> {
    if bytes.len() < RVOL_HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!("truncated header: expected {RVOL_HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != RVOL_MAGIC {
        return Err(format_err(0, "bad magic, not an RVOL file"));
    }
    let version = le_u32(bytes, 4);
    if version != RVOL_VERSION {
        return Err(format_err(4, format!("unsupported RVOL version {version}")));
    }
    let dims = [0, 1, 2].map(|a| le_u32(bytes, 8 + 4 * a) as usize);
    if dims.iter().any(|&d| d == 0) {
        return Err(format_err(8, format!("zero extent in dims {dims:?}")));
    }
    let spacing = [0, 1, 2].map(|a| le_f64(bytes, 20 + 8 * a) as Float);
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(format_err(20, format!("spacing must be positive and finite, got {spacing:?}")));
    }
    let dtype = Dtype::from_code(bytes[44]).ok_or_else(|| format_err(44, format!("unknown dtype code {}", bytes[44])))?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| format_err(8, format!("dims {dims:?} overflow")))?;
    let payload = &bytes[RVOL_HEADER_LEN..];
    if payload.len() != n {
        return Err(format_err(
            RVOL_HEADER_LEN,
            format!(
                "voxel data length mismatch: expected {n} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let mut data = vec![0.0; n / dtype.size()];
    for (i, chunk) in payload.chunks_exact(dtype.size()).enumerate() {
        let x = i % dims[0];
        let y = (i / dims[0]) % dims[1];
        let z = i / (dims[0] * dims[1]);
        data[(x * dims[1] + y) * dims[2] + z] = match dtype {
            Dtype::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as Float,
            Dtype::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")) as Float,
        };
    }
    debug_assert_eq!(file_index(dims, dims[0] - 1, dims[1] - 1, dims[2] - 1) + 1, data.len());
    let volume = Volume::new(Tensor::new(dims.to_vec(), data)?, spacing)?;
    Ok((volume, dtype))
}

pub fn read_volume_file(path: &Path) -> Result<(Volume, Dtype)> {
    let bytes = fs::read(path).map_err(Error::file(path))?;
    decode_volume(&bytes).map_err(|e| in_file(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    read_volume_file(path).map(|(v, _)| v)
}

pub fn write_volume_as(v: &Volume, path: &Path, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_volume(v, dtype)).map_err(Error::file(path))
}

/// Writes in the build's native float width.
pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    write_volume_as(v, path, Dtype::native())
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    }
}

/// Coordinates with 17 significant digits, preceded by a comment line.
pub fn format_landmark(l: &Landmark) -> String {
    let [x, y, z] = l.coords;
    format!("# landmark x y z in voxels\n{x:.16e} {y:.16e} {z:.16e}\n")
}

pub fn parse_landmark(text: &str) -> Result<Landmark> {
    let mut found: Option<(usize, [Float; 3])> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((first, _)) = found {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("second coordinate line (first on line {first})"),
            });
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut c = [0.0; 3];
        for (a, f) in fields.iter().enumerate() {
            c[a] = f
                .parse::<Float>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("not a finite number: {f:?}"),
                })?;
        }
        found = Some((line_no, c));
    }
    found
        .map(|(_, c)| Landmark::original(c))
        .ok_or_else(|| Error::Parse {
            line: text.lines().count().max(1),
            msg: "no coordinate line".into(),
        })
}

pub fn read_landmark(path: &Path) -> Result<Landmark> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    parse_landmark(&text).map_err(|e| in_file(path, e))
}

pub fn write_landmark(l: &Landmark, path: &Path) -> Result<()> {
    l.expect_space(Space::Original)?;
    fs::write(path, format_landmark(l)).map_err(Error::file(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub subject: String,
    pub volume: PathBuf,
    pub landmark: PathBuf,
    pub split: Split,
}

/// Dataset listing; relative paths resolve against `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Fails if any subject appears under more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if let Some(&prev) = seen.get(e.subject.as_str()) {
                if prev != e.split {
                    return Err(Error::config(format!(
                        "subject {} appears in both the {} and {} splits",
                        e.subject,
                        prev.name(),
                        e.split.name()
                    )));
                }
            }
            seen.insert(&e.subject, e.split);
        }
        Ok(())
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            let split = fields[3].parse::<Split>().map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            entries.push(ManifestEntry {
                subject: fields[0].to_string(),
                volume: PathBuf::from(fields[1]),
                landmark: PathBuf::from(fields[2]),
                split,
            });
        }
        let m = Manifest {
            root: root.to_path_buf(),
            entries,
        };
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::file(path))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root).map_err(|e| in_file(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# subject_id\tvolume_path\tlandmark_path\tsplit\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                e.subject,
                e.volume.display(),
                e.landmark.display(),
                e.split.name()
            );
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.check_disjoint()?;
        fs::write(path, self.to_text()).map_err(Error::file(path))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<(Volume, Landmark)> {
        Ok((
            read_volume(&self.resolve(&e.volume))?,
            read_landmark(&self.resolve(&e.landmark))?,
        ))
    }
}

/// Parameters of the synthetic volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub extents: [usize; 3],
    pub spacing: [Float; 3],
    /// Shortest wavelength of the background, in voxels.
    pub background_scale: Float,
    pub background_amplitude: Float,
    pub notch_depth: Float,
    /// Gaussian widths of the notch along its own axes, in voxels.
    pub notch_width: [Float; 3],
    pub noise: Float,
    /// Minimum distance of the apex from every face.
    pub margin: usize,
    pub seed: u64,
    /// Relative sizes of the train, validation and test splits.
    pub split_weights: [Float; 3],
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.extents[a] <= 2 * self.margin {
                return Err(Error::config(format!(
                    "extent {} on axis {a} leaves no room for a {}-voxel margin",
                    self.extents[a], self.margin
                )));
            }
            if !(self.spacing[a] > 0.0) || !(self.notch_width[a] > 0.0) {
                return Err(Error::config("spacing and notch widths must be positive"));
            }
        }
        if !(self.background_scale > 0.0) {
            return Err(Error::config("background scale must be positive"));
        }
        if self.noise < 0.0 || self.background_amplitude < 0.0 || !(self.notch_depth > 0.0) {
            return Err(Error::config("noise and background amplitude must be non-negative, notch depth positive"));
        }
        if self.split_weights.iter().any(|w| !(*w >= 0.0)) || self.split_weights.iter().sum::<Float>() <= 0.0 {
            return Err(Error::config(format!(
                "split weights must be non-negative with a positive sum, got {:?}",
                self.split_weights
            )));
        }
        Ok(())
    }
}

/// Random generator of subject `index`, independent of every other subject.
pub fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | index as u64);
    rng
}

/// Uniformly random rotation (rows are the notch axes).
fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[Float; 3]; 3] {
    let a: [f64; 3] = UnitSphere.sample(rng);
    let mut b: [f64; 3] = UnitSphere.sample(rng);
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    for k in 0..3 {
        b[k] -= d * a[k];
    }
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    if nb < 1e-6 {
        return random_rotation(rng);
    }
    let b = b.map(|v| v / nb);
    let c = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    [a, b, c].map(|r| r.map(|v| v as Float))
}

/// One synthetic subject: a smooth background with a dark, randomly oriented
/// anisotropic notch whose deepest point is the landmark, plus Gaussian noise.
/// The apex sits on a voxel centre.
pub fn synthesize_subject(spec: &SynthSpec, index: usize) -> Result<(Volume, Landmark)> {
    spec.validate()?;
    let mut rng = subject_rng(spec.seed, index);
    let [nx, ny, nz] = spec.extents;
    let apex = [0, 1, 2].map(|a| rng.gen_range(spec.margin..spec.extents[a] - spec.margin) as Float);

    let waves: Vec<([Float; 3], Float, Float)> = (0..4)
        .map(|_| {
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let wavelength = spec.background_scale * rng.gen_range(1.0..2.0);
            let k = dir.map(|d| d as Float * 2.0 * std::f64::consts::PI as Float / wavelength);
            let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI) as Float;
            let amp = spec.background_amplitude * rng.gen_range(0.5..1.0) / 2.0;
            (k, phase, amp)
        })
        .collect();
    let rot = random_rotation(&mut rng);
    let width = spec.notch_width.map(|w| w * rng.gen_range(0.8..1.25));
    let depth = spec.notch_depth * rng.gen_range(0.8..1.2);
    let noise = Normal::new(0.0, spec.noise.max(0.0) as f64).map_err(|e| Error::config(e.to_string()))?;

    let mut data = Vec::with_capacity(nx * ny * nz);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = [x as Float, y as Float, z as Float];
                let d = [p[0] - apex[0], p[1] - apex[1], p[2] - apex[2]];
                let mut q = 0.0;
                for k in 0..3 {
                    let u = rot[k][0] * d[0] + rot[k][1] * d[1] + rot[k][2] * d[2];
                    q += u * u / (width[k] * width[k]);
                }
                let mut v = 1.0 - depth * (-0.5 * q).exp();
                for (k, phase, amp) in &waves {
                    v += amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos();
                }
                if spec.noise > 0.0 {
                    v += noise.sample(&mut rng) as Float;
                }
                data.push(v);
            }
        }
    }
    let volume = Volume::new(Tensor::new(vec![nx, ny, nz], data)?, spec.spacing)?;
    Ok((volume, Landmark::original(apex)))
}

/// Split sizes by largest remainder.
pub fn split_counts(count: usize, weights: [Float; 3]) -> [usize; 3] {
    let total: Float = weights.iter().sum();
    let exact = weights.map(|w| w / total * count as Float);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let mut left = count - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

pub fn subject_id(index: usize) -> String {
    format!("subj{index:04}")
}

/// Split assignment of `count` subjects: a seeded shuffle cut by [`split_counts`].
pub fn assign_splits(count: usize, weights: [Float; 3], seed: u64) -> Vec<Split> {
    let counts = split_counts(count, weights);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut subject_rng(seed, usize::MAX >> 1));
    let mut splits = vec![Split::Train; count];
    let mut k = 0;
    for (s, &n) in Split::ALL.iter().zip(&counts) {
        for &i in &order[k..k + n] {
            splits[i] = *s;
        }
        k += n;
    }
    splits
}

/// Writes `count` subjects under `dir` (`volumes/`, `landmarks/`, `manifest.tsv`).
pub fn generate_synthetic(spec: &SynthSpec, count: usize, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    for sub in ["volumes", "landmarks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(Error::file(&d))?;
    }
    let splits = assign_splits(count, spec.split_weights, spec.seed);
    let mut entries = Vec::with_capacity(count);
    for (i, &split) in splits.iter().enumerate() {
        let (volume, apex) = synthesize_subject(spec, i)?;
        let id = subject_id(i);
        let vol = PathBuf::from("volumes").join(format!("{id}.rvol"));
        let lm = PathBuf::from("landmarks").join(format!("{id}.txt"));
        write_volume(&volume, &dir.join(&vol))?;
        write_landmark(&apex, &dir.join(&lm))?;
        entries.push(ManifestEntry {
            subject: id,
            volume: vol,
            landmark: lm,
            split,
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.save(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_length() {
        let v = Volume::new(Tensor::zeros(&[2, 3, 4]), [1.0; 3]).unwrap();
        assert_eq!(encode_volume(&v, Dtype::F64).len(), RVOL_HEADER_LEN + 192);
    }

    #[test]
    fn file_order_is_x_fastest() {
        let v = Volume::new(Tensor::from_fn(&[2, 3, 4], |i| i as Float), [1.0; 3]).unwrap();
        let b = encode_volume(&v, Dtype::F64);
        let second = le_f64(&b, RVOL_HEADER_LEN + 8);
        assert_eq!(second as Float, v.at(1, 0, 0));
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let v = Volume::new(Tensor::zeros(&[2, 2, 2]), [1.0; 3]).unwrap();
        let b = encode_volume(&v, Dtype::F32);
        let err = decode_volume(&b[..b.len() - 1]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 32 bytes, found 31"), "{msg}");
    }

    #[test]
    fn landmark_text() {
        let l = parse_landmark("12.25 40.0 7.5").unwrap();
        assert_eq!(l.coords, [12.25, 40.0, 7.5]);
        let l = parse_landmark("# comment\n\n1 2 3\n").unwrap();
        assert_eq!(l.coords, [1.0, 2.0, 3.0]);
        assert!(matches!(parse_landmark("# c\n1 2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_landmark("1 2 x"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_landmark("1 2 3\n4 5 6"), Err(Error::Parse { line: 2, .. })));
        assert!(parse_landmark("# nothing\n").is_err());
    }

    #[test]
    fn split_counts_examples() {
        assert_eq!(split_counts(70, [5.0, 1.0, 1.0]), [50, 10, 10]);
        assert_eq!(split_counts(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(split_counts(7, [1.0, 1.0, 1.0]), [3, 2, 2]);
    }

    #[test]
    fn manifest_rejects_overlapping_subjects() {
        let text = "a\tv1\tl1\ttrain\na\tv2\tl2\ttest\n";
        assert!(Manifest::parse(text, Path::new(".")).is_err());
        let text = "a\tv1\tl1\ttrain\na\tv2\tl2\ttrain\nb\tv3\tl3\ttest\n";
        assert_eq!(Manifest::parse(text, Path::new(".")).unwrap().entries.len(), 3);
        assert!(matches!(
            Manifest::parse("a\tv\tl\tholdout\n", Path::new(".")),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
