//! On-disk formats: APC1 point clouds, APH1 phantoms, NAPS checkpoints,
//! text manifests with a SHA-256 checksum line, and report/history tables.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::bench::{RunReport, RunRow};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::phantom::{Manifest, Phantom, SampleRecord, Split};
use crate::trainer::EpochStats;
use crate::types::{ClassLabel, LabeledPoint, Mask, PointCloud, RegionLabel, RegionMasks, SliceImage};

pub const CLOUD_MAGIC: &[u8; 4] = b"APC1";
pub const PHANTOM_MAGIC: &[u8; 4] = b"APH1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NAPS";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CLOUD_HEADER_BYTES: usize = 12;
pub const POINT_RECORD_BYTES: usize = 13;
const UNLABELLED: u8 = 255;
const OUTSIDE: u8 = 255;

/// Bounds-checked little-endian cursor.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Length(format!("{what}: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Length(format!("{what}: {} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn class_code(label: Option<ClassLabel>) -> u8 {
    label.map_or(UNLABELLED, |c| c.index() as u8)
}

fn class_from_code(code: u8) -> Result<Option<ClassLabel>> {
    match code {
        UNLABELLED => Ok(None),
        c => ClassLabel::from_index(c as usize)
            .map(Some)
            .ok_or_else(|| Error::Value(format!("class code {c} is not 0, 1 or 255"))),
    }
}

fn reserved(r: &mut Reader<'_>) -> Result<()> {
    if r.take(3, "reserved bytes")? != [0, 0, 0] {
        return Err(Error::Value("reserved header bytes must be zero".into()));
    }
    Ok(())
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(CLOUD_HEADER_BYTES + POINT_RECORD_BYTES * cloud.len());
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    out.push(class_code(cloud.class_label));
    out.extend_from_slice(&[0, 0, 0]);
    for p in &cloud.points {
        out.extend_from_slice(&p.x.to_le_bytes());
        out.extend_from_slice(&p.y.to_le_bytes());
        out.extend_from_slice(&p.intensity.to_le_bytes());
        out.push(p.region.code());
    }
    out
}

/// Inverse of [`encode_cloud`]. The source id is not stored and comes back empty.
pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new(bytes);
    r.magic(CLOUD_MAGIC)?;
    let count = r.u32("point count")? as usize;
    let class_label = class_from_code(r.u8("class")?)?;
    reserved(&mut r)?;
    let body = count
        .checked_mul(POINT_RECORD_BYTES)
        .ok_or_else(|| Error::Length(format!("point count {count} overflows")))?;
    if r.remaining() != body {
        return Err(Error::Length(format!("header declares {count} points ({body} bytes), body has {} bytes", r.remaining())));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let x = r.f32("x")?;
        let y = r.f32("y")?;
        let intensity = r.f32("intensity")?;
        let code = r.u8("region")?;
        let region = RegionLabel::from_code(code).ok_or_else(|| Error::Value(format!("point {i}: region code {code} > 3")))?;
        if !((-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y)) {
            return Err(Error::Value(format!("point {i}: coordinates ({x}, {y}) outside [-1, 1]")));
        }
        if !(0.0..=1.0).contains(&intensity) {
            return Err(Error::Value(format!("point {i}: intensity {intensity} outside [0, 1]")));
        }
        points.push(LabeledPoint { x, y, intensity, region });
    }
    r.finish("cloud")?;
    Ok(PointCloud { points, class_label, source_id: String::new() })
}

/// Phantom file: magic, u32 width, u32 height, u8 class, 3 zero bytes,
/// `w*h` f32 pixels, then `w*h` region codes (255 outside the brain).
pub fn encode_phantom(p: &Phantom) -> Vec<u8> {
    let (w, h) = (p.slice.width, p.slice.height);
    let mut out = Vec::with_capacity(16 + 5 * w * h);
    out.extend_from_slice(PHANTOM_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.push(p.class.index() as u8);
    out.extend_from_slice(&[0, 0, 0]);
    for v in &p.slice.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for row in 0..h {
        for col in 0..w {
            out.push(p.masks.label_at(col, row).map_or(OUTSIDE, RegionLabel::code));
        }
    }
    out
}

pub fn decode_phantom(bytes: &[u8]) -> Result<Phantom> {
    let mut r = Reader::new(bytes);
    r.magic(PHANTOM_MAGIC)?;
    let w = r.u32("width")? as usize;
    let h = r.u32("height")? as usize;
    let class = class_from_code(r.u8("class")?)?.ok_or_else(|| Error::Value("phantom must carry a class".into()))?;
    reserved(&mut r)?;
    let area = w.checked_mul(h).filter(|a| a.checked_mul(5) == Some(r.remaining()));
    let Some(area) = area else {
        return Err(Error::Length(format!("{w}x{h} phantom does not match {} body bytes", r.remaining())));
    };
    let pixels = (0..area).map(|_| r.f32("pixel")).collect::<Result<Vec<_>>>()?;
    let slice = SliceImage::new(w, h, pixels).map_err(|e| Error::Value(e.to_string()))?;
    let codes = r.take(area, "labels")?;
    r.finish("phantom")?;
    let mut brain = Mask::new(w, h);
    let mut regions: [Mask; 4] = std::array::from_fn(|_| Mask::new(w, h));
    for (i, &c) in codes.iter().enumerate() {
        if c == OUTSIDE {
            continue;
        }
        let label = RegionLabel::from_code(c).ok_or_else(|| Error::Value(format!("label code {c}")))?;
        brain.set(i % w, i / w, true);
        regions[label.index()].set(i % w, i / w, true);
    }
    Ok(Phantom { slice, masks: RegionMasks { brain, regions }, class })
}

const MAX_LAYERS: usize = 16;
const MAX_WIDTH: usize = 1 << 14;

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn get_dims(r: &mut Reader<'_>, what: &str) -> Result<Vec<usize>> {
    let n = r.u32(what)? as usize;
    if n == 0 || n > MAX_LAYERS {
        return Err(Error::Value(format!("{what}: {n} layers")));
    }
    (0..n)
        .map(|_| {
            let d = r.u32(what)? as usize;
            if d == 0 || d > MAX_WIDTH {
                return Err(Error::Value(format!("{what}: width {d}")));
            }
            Ok(d)
        })
        .collect()
}

/// Checkpoint: magic, u32 version, config block, then every parameter
/// tensor as little-endian f32 in declaration order.
pub fn encode_checkpoint(params: &ModelParams<f32>) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + 4 * c.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(c.input_dim as u32).to_le_bytes());
    put_dims(&mut out, &c.encoder_dims);
    out.extend_from_slice(&(c.fusion_dim as u32).to_le_bytes());
    put_dims(&mut out, &c.head_dims);
    out.extend_from_slice(&c.init_seed.to_le_bytes());
    for t in params.tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Value(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let input_dim = r.u32("input dim")? as usize;
    let encoder_dims = get_dims(&mut r, "encoder dims")?;
    let fusion_dim = r.u32("fusion dim")? as usize;
    let head_dims = get_dims(&mut r, "head dims")?;
    let init_seed = r.u64("init seed")?;
    let config = ModelConfig { input_dim, encoder_dims, fusion_dim, head_dims, init_seed };
    config.validate().map_err(|e| Error::Value(e.to_string()))?;
    if r.remaining() != 4 * config.parameter_count() {
        return Err(Error::Length(format!(
            "{} parameter bytes, config implies {}",
            r.remaining(),
            4 * config.parameter_count()
        )));
    }
    let template = ModelParams::<f32>::from_tensors(config.clone(), zero_tensors(&config)?)?;
    let tensors = template
        .tensors()
        .iter()
        .map(|t| {
            let data = (0..t.len()).map(|_| r.f32("parameter")).collect::<Result<Vec<_>>>()?;
            Tensor::new(t.shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish("checkpoint")?;
    let params = ModelParams::from_tensors(config, tensors)?;
    if !params.all_finite() {
        return Err(Error::Value("checkpoint holds non-finite parameters".into()));
    }
    Ok(params)
}

fn zero_tensors(config: &ModelConfig) -> Result<Vec<Tensor<f32>>> {
    let p = crate::model::init_params::<f32>(config)?;
    Ok(p.tensors().iter().map(|t| Tensor::zeros(t.shape.clone())).collect())
}

pub const MANIFEST_HEADER: &str = "neuroaps-manifest v1";
const MANIFEST_COLUMNS: &str = "sample_id\tclass\tsplit\tpath";
const CHECKSUM_PREFIX: &str = "checksum sha256:";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Tab-separated manifest text. The final line holds the SHA-256 of every
/// byte before it.
pub fn manifest_to_string(manifest: &Manifest) -> Result<String> {
    let mut body = format!("{MANIFEST_HEADER}\n{MANIFEST_COLUMNS}\n");
    for r in &manifest.records {
        for field in [&r.sample_id, &r.path] {
            if field.is_empty() || field.contains(['\t', '\n', '\r']) {
                return Err(Error::InvalidInput(format!("manifest field {field:?} is empty or holds a tab or newline")));
            }
        }
        writeln!(body, "{}\t{}\t{}\t{}", r.sample_id, r.class, r.split.as_str(), r.path).unwrap();
    }
    let digest = sha256_hex(body.as_bytes());
    Ok(format!("{body}{CHECKSUM_PREFIX}{digest}\n"))
}

pub fn manifest_from_str(text: &str) -> Result<Manifest> {
    let trimmed = text.strip_suffix('\n').ok_or_else(|| Error::Format("manifest must end with a newline".into()))?;
    let (body_len, checksum_line) = match trimmed.rfind('\n') {
        Some(i) => (i + 1, &trimmed[i + 1..]),
        None => return Err(Error::Format("manifest has no checksum line".into())),
    };
    let expected = checksum_line
        .strip_prefix(CHECKSUM_PREFIX)
        .ok_or_else(|| Error::Format("last line is not a checksum line".into()))?;
    let body = &text[..body_len];
    let computed = sha256_hex(body.as_bytes());
    if expected != computed {
        return Err(Error::Integrity { expected: expected.to_string(), computed });
    }
    let mut lines = body.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("first line must be {MANIFEST_HEADER:?}")));
    }
    if lines.next() != Some(MANIFEST_COLUMNS) {
        return Err(Error::Format("missing column header".into()));
    }
    let records = lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| Error::Format(format!("manifest row {}: {m}", i + 1));
            if f.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            Ok(SampleRecord {
                sample_id: f[0].to_string(),
                class: ClassLabel::parse(f[1]).ok_or_else(|| bad("class must be CN or AD"))?,
                split: Split::parse(f[2]).ok_or_else(|| bad("split must be train or test"))?,
                path: f[3].to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest { records })
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error.to_string()))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, &encode_cloud(cloud))
}

/// Decode a cloud file; the source id becomes the file stem.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let mut cloud = decode_cloud(&read_bytes(path)?)?;
    cloud.source_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(cloud)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_atomic(path, manifest_to_string(manifest)?.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    manifest_from_str(text)
}

pub fn write_phantom(path: &Path, p: &Phantom) -> Result<()> {
    write_atomic(path, &encode_phantom(p))
}

pub fn read_phantom(path: &Path) -> Result<Phantom> {
    decode_phantom(&read_bytes(path)?)
}

pub fn write_checkpoint(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    decode_checkpoint(&read_bytes(path)?)
}

pub const REPORT_HEADER: &str = "variant,n_points,seed,accuracy,latency_ms,peak_workspace_bytes";

pub fn report_csv(report: &RunReport) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in &report.rows {
        writeln!(s, "{},{},{},{},{},{}", r.variant.name(), r.n_points, r.seed, r.accuracy, r.latency_ms, r.peak_workspace_bytes)
            .unwrap();
    }
    s
}

pub fn report_json(report: &RunReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,test_acc\n");
    for h in history {
        let test = h.test_accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{}", h.epoch, h.train_loss, h.train_accuracy, test).unwrap();
    }
    s
}

const REGION_COLORS: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#b0b0b0"];

/// Scatter plot of a cloud, one color per region.
pub fn cloud_svg(cloud: &PointCloud, size_px: usize) -> String {
    let s = size_px as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size_px}\" height=\"{size_px}\" viewBox=\"0 0 {size_px} {size_px}\">\n<rect width=\"100%\" height=\"100%\" fill=\"black\"/>\n"
    );
    for label in RegionLabel::ALL {
        writeln!(out, "<g fill=\"{}\"><title>{label}</title>", REGION_COLORS[label.index()]).unwrap();
        for p in cloud.points.iter().filter(|p| p.region == label) {
            let cx = (p.x as f64 + 1.0) / 2.0 * s;
            let cy = (p.y as f64 + 1.0) / 2.0 * s;
            writeln!(out, "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"1\"/>").unwrap();
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart of mean accuracy per (variant, n_points) group, annotated
/// with the mean latency.
pub fn report_svg(report: &RunReport) -> String {
    let mut groups: Vec<((String, usize), Vec<&RunRow>)> = Vec::new();
    for r in &report.rows {
        let key = (r.variant.name().to_string(), r.n_points);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let (bar, gap, height, top) = (60.0, 20.0, 300.0, 30.0);
    let width = gap + groups.len() as f64 * (bar + gap);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        height + top + 50.0
    );
    writeln!(out, "<line x1=\"0\" y1=\"{}\" x2=\"{width}\" y2=\"{}\" stroke=\"black\"/>", top + height, top + height).unwrap();
    for (i, ((variant, n), rows)) in groups.iter().enumerate() {
        let k = rows.len() as f64;
        let acc = rows.iter().map(|r| r.accuracy).sum::<f64>() / k;
        let lat = rows.iter().map(|r| r.latency_ms).sum::<f64>() / k;
        let x = gap + i as f64 * (bar + gap);
        let h = acc * height;
        writeln!(
            out,
            "<rect x=\"{x}\" y=\"{:.2}\" width=\"{bar}\" height=\"{h:.2}\" fill=\"#4c72b0\"/>",
            top + height - h
        )
        .unwrap();
        writeln!(out, "<text x=\"{x}\" y=\"{:.2}\">{:.1}%</text>", top + height - h - 4.0, 100.0 * acc).unwrap();
        writeln!(out, "<text x=\"{x}\" y=\"{}\">{variant}</text>", top + height + 15.0).unwrap();
        writeln!(out, "<text x=\"{x}\" y=\"{}\">n={n}</text>", top + height + 28.0).unwrap();
        writeln!(out, "<text x=\"{x}\" y=\"{}\">{lat:.2} ms</text>", top + height + 41.0).unwrap();
    }
    out.push_str("</svg>\n");
    out
}
