//! Bit-exact little-endian file formats for cubes, checkpoints, and reports,
//! plus the sections-of-key-value config format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::ndtensor::scalar::Scalar;
use crate::ndtensor::tensor::Tensor;

const CUBE_MAGIC: &[u8; 4] = b"HSC1";
const CKPT_MAGIC: &[u8; 4] = b"FMU1";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(buf)
}

fn split_container<'a>(
    bytes: &'a [u8],
    magic: &'static [u8; 4],
    magic_name: &'static str,
) -> Result<(&'a str, &'a [u8])> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::BadMagic { expected: magic_name });
    }
    let hlen = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::TruncatedPayload {
            expected: 8 + hlen,
            found: bytes.len(),
        });
    }
    let header = std::str::from_utf8(&bytes[8..8 + hlen])
        .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
    Ok((header, &bytes[8 + hlen..]))
}

fn header_fields(header: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for line in header.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::MalformedHeader(format!("bad line '{line}'")))?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn lookup<'a>(fields: &'a [(String, String)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::MalformedHeader(format!("missing field '{key}'")))
}

fn parse_usize(fields: &[(String, String)], key: &str) -> Result<usize> {
    lookup(fields, key)?
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("field '{key}' is not an integer")))
}

// ---------------------------------------------------------------------------
// Cube container: magic "HSC1", text header, f32le payload, band fastest.
// ---------------------------------------------------------------------------

/// Write a `[W, H, bands]` tensor (measurements are saved with bands = 1 and
/// shape `[W, H_meas, 1]`). Payload is always f32le.
pub fn save_cube<S: Scalar>(path: &Path, cube: &Tensor<S>) -> Result<()> {
    if cube.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "save_cube",
            detail: format!("want rank 3, got {:?}", cube.shape()),
        });
    }
    let (w, h, b) = (cube.shape()[0], cube.shape()[1], cube.shape()[2]);
    let header = format!("width={w}\nheight={h}\nbands={b}\ndtype=f32le\n");
    let mut bytes = Vec::with_capacity(8 + header.len() + 4 * cube.numel());
    bytes.extend_from_slice(CUBE_MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in cube.data() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn load_cube<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = read_file(path)?;
    let (header, payload) = split_container(&bytes, CUBE_MAGIC, "HSC1")?;
    let fields = header_fields(header)?;
    let w = parse_usize(&fields, "width")?;
    let h = parse_usize(&fields, "height")?;
    let b = parse_usize(&fields, "bands")?;
    let dtype = lookup(&fields, "dtype")?;
    if dtype != "f32le" {
        return Err(Error::MalformedHeader(format!("unsupported dtype '{dtype}'")));
    }
    let want = 4 * w * h * b;
    if payload.len() < want {
        return Err(Error::TruncatedPayload {
            expected: want,
            found: payload.len(),
        });
    }
    if payload.len() > want {
        return Err(Error::TrailingBytes(payload.len() - want));
    }
    let mut data = Vec::with_capacity(w * h * b);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        data.push(S::from_f64(v as f64));
    }
    Tensor::from_vec(vec![w, h, b], data)
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "FMU1", manifest, concatenated float payloads.
// ---------------------------------------------------------------------------

/// One named tensor inside a checkpoint; `key` carries the slot kind, e.g.
/// `param:le.stem.w`, `adam_m:den.0.head.w`.
#[derive(Debug, Clone)]
pub struct CkptTensor<S> {
    pub key: String,
    pub trainable: bool,
    pub tensor: Tensor<S>,
}

/// In-memory image of a checkpoint file. Payload dtype follows the scalar
/// the run used (f32le in training mode, f64le in verification mode), so a
/// reload reproduces the trajectory at full stored precision.
#[derive(Debug, Clone)]
pub struct CheckpointData<S> {
    pub epoch: usize,
    pub step: usize,
    pub adam_step: usize,
    pub config_hash: String,
    pub config_text: String,
    pub rng_key: u64,
    pub rng_counter: u64,
    pub tensors: Vec<CkptTensor<S>>,
}

pub fn save_ckpt<S: Scalar>(path: &Path, ckpt: &CheckpointData<S>) -> Result<()> {
    let dtype = if S::BITS == 64 { "f64le" } else { "f32le" };
    let word = (S::BITS / 8) as usize;
    let mut manifest = String::new();
    manifest.push_str(&format!("epoch={}\n", ckpt.epoch));
    manifest.push_str(&format!("step={}\n", ckpt.step));
    manifest.push_str(&format!("adam_step={}\n", ckpt.adam_step));
    manifest.push_str(&format!("config_hash={}\n", ckpt.config_hash));
    manifest.push_str(&format!("rng_key={}\n", ckpt.rng_key));
    manifest.push_str(&format!("rng_counter={}\n", ckpt.rng_counter));
    manifest.push_str(&format!("dtype={dtype}\n"));
    let config_lines: Vec<&str> = if ckpt.config_text.is_empty() {
        Vec::new()
    } else {
        ckpt.config_text.lines().collect()
    };
    manifest.push_str(&format!("config_lines={}\n", config_lines.len()));
    for line in &config_lines {
        manifest.push_str(line);
        manifest.push('\n');
    }
    manifest.push_str(&format!("tensors={}\n", ckpt.tensors.len()));
    let mut offset = 0usize;
    for t in &ckpt.tensors {
        let nbytes = t.tensor.numel() * word;
        let shape = t
            .tensor
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        manifest.push_str(&format!(
            "{}|{}|{}|{}|{}\n",
            t.key,
            if t.trainable { 1 } else { 0 },
            shape,
            offset,
            nbytes
        ));
        offset += nbytes;
    }

    let mut bytes = Vec::with_capacity(8 + manifest.len() + offset);
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    bytes.extend_from_slice(manifest.as_bytes());
    for t in &ckpt.tensors {
        for v in t.tensor.data() {
            if S::BITS == 64 {
                bytes.extend_from_slice(&v.as_f64().to_le_bytes());
            } else {
                bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    write_file(path, &bytes)
}

pub fn load_ckpt<S: Scalar>(path: &Path) -> Result<CheckpointData<S>> {
    let bytes = read_file(path)?;
    let (manifest, payload) = split_container(&bytes, CKPT_MAGIC, "FMU1")?;
    let mut lines = manifest.lines();
    let mut head = Vec::new();
    for _ in 0..7 {
        let line = lines
            .next()
            .ok_or_else(|| Error::MalformedHeader("manifest too short".into()))?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::MalformedHeader(format!("bad line '{line}'")))?;
        head.push((k.to_string(), v.to_string()));
    }
    let epoch = parse_usize(&head, "epoch")?;
    let step = parse_usize(&head, "step")?;
    let adam_step = parse_usize(&head, "adam_step")?;
    let config_hash = lookup(&head, "config_hash")?.to_string();
    let rng_key: u64 = lookup(&head, "rng_key")?
        .parse()
        .map_err(|_| Error::MalformedHeader("rng_key not a u64".into()))?;
    let rng_counter: u64 = lookup(&head, "rng_counter")?
        .parse()
        .map_err(|_| Error::MalformedHeader("rng_counter not a u64".into()))?;
    let dtype = lookup(&head, "dtype")?.to_string();
    let word = match dtype.as_str() {
        "f32le" => 4usize,
        "f64le" => 8usize,
        other => {
            return Err(Error::MalformedHeader(format!("unsupported dtype '{other}'")))
        }
    };
    if word == 8 && S::BITS == 32 {
        return Err(Error::MalformedHeader(
            "refusing to narrow an f64le checkpoint into 32-bit mode".into(),
        ));
    }

    let n_cfg: usize = {
        let line = lines
            .next()
            .ok_or_else(|| Error::MalformedHeader("missing config_lines".into()))?;
        let v = line
            .strip_prefix("config_lines=")
            .ok_or_else(|| Error::MalformedHeader("missing config_lines".into()))?;
        v.parse()
            .map_err(|_| Error::MalformedHeader("config_lines not an integer".into()))?
    };
    let mut config_text = String::new();
    for _ in 0..n_cfg {
        let line = lines
            .next()
            .ok_or_else(|| Error::MalformedHeader("config text truncated".into()))?;
        config_text.push_str(line);
        config_text.push('\n');
    }

    let n_tensors: usize = {
        let line = lines
            .next()
            .ok_or_else(|| Error::MalformedHeader("missing tensors count".into()))?;
        let v = line
            .strip_prefix("tensors=")
            .ok_or_else(|| Error::MalformedHeader("missing tensors count".into()))?;
        v.parse()
            .map_err(|_| Error::MalformedHeader("tensors not an integer".into()))?
    };

    let mut tensors = Vec::with_capacity(n_tensors);
    let mut expected_offset = 0usize;
    for _ in 0..n_tensors {
        let line = lines
            .next()
            .ok_or_else(|| Error::MalformedHeader("tensor table truncated".into()))?;
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 5 {
            return Err(Error::MalformedHeader(format!("bad tensor line '{line}'")));
        }
        let key = parts[0].to_string();
        let trainable = parts[1] == "1";
        let shape: Vec<usize> = if parts[2].is_empty() {
            Vec::new()
        } else {
            parts[2]
                .split(',')
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| Error::MalformedHeader(format!("bad shape in '{line}'")))
                })
                .collect::<Result<_>>()?
        };
        let offset: usize = parts[3]
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("bad offset in '{line}'")))?;
        let nbytes: usize = parts[4]
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("bad length in '{line}'")))?;
        if offset != expected_offset {
            return Err(Error::OffsetMismatch(format!(
                "tensor '{key}' at {offset}, expected {expected_offset}"
            )));
        }
        let numel: usize = shape.iter().product();
        if nbytes != numel * word {
            return Err(Error::OffsetMismatch(format!(
                "tensor '{key}' length {nbytes} vs shape {:?}",
                shape
            )));
        }
        if payload.len() < offset + nbytes {
            return Err(Error::TruncatedPayload {
                expected: offset + nbytes,
                found: payload.len(),
            });
        }
        let raw = &payload[offset..offset + nbytes];
        let mut data = Vec::with_capacity(numel);
        if word == 4 {
            for c in raw.chunks_exact(4) {
                data.push(S::from_f64(
                    f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64
                ));
            }
        } else {
            for c in raw.chunks_exact(8) {
                data.push(S::from_f64(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ])));
            }
        }
        tensors.push(CkptTensor {
            key,
            trainable,
            tensor: Tensor::from_vec(shape, data)?,
        });
        expected_offset += nbytes;
    }
    if payload.len() != expected_offset {
        return Err(Error::OffsetMismatch(format!(
            "payload has {} bytes, manifest covers {expected_offset}",
            payload.len()
        )));
    }

    Ok(CheckpointData {
        epoch,
        step,
        adam_step,
        config_hash,
        config_text,
        rng_key,
        rng_counter,
        tensors,
    })
}

// ---------------------------------------------------------------------------
// Config format: [section] headers over key = value lines, '#' comments.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct ConfigDoc {
    pub sections: Vec<(String, Vec<(String, String)>)>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<ConfigDoc> {
        let mut doc = ConfigDoc::default();
        let mut current: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                doc.sections.push((name.trim().to_string(), Vec::new()));
                current = Some(doc.sections.len() - 1);
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let idx = current.ok_or_else(|| {
                Error::Config(format!("line {}: key outside any [section]", lineno + 1))
            })?;
            doc.sections[idx]
                .1
                .push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<ConfigDoc> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn section(&self, name: &str) -> Option<&[(String, String)]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, kv)| kv.as_slice())
    }
}

/// FNV-1a hash of the canonical config text, hex-encoded; embedded in
/// checkpoints and reports so results are self-describing.
pub fn config_hash(text: &str) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in text.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

// ---------------------------------------------------------------------------
// Reports and previews
// ---------------------------------------------------------------------------

/// Serialize a report. Deliberately excludes wall-clock runtime so identical
/// seeds yield byte-identical files.
pub fn report_to_text(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str("fmu evaluation report\n");
    s.push_str(&format!("config_hash={}\n", report.config_hash));
    s.push_str(&format!("seed={}\n", report.seed));
    for scene in &report.scenes {
        s.push_str(&format!(
            "scene={} psnr={} ssim={:.6}\n",
            scene.name, scene.psnr, scene.ssim
        ));
    }
    match report.mean_psnr() {
        Some(m) => s.push_str(&format!("mean_psnr={m:.4}\n")),
        None => s.push_str("mean_psnr=identical\n"),
    }
    match report.median_psnr() {
        Some(m) => s.push_str(&format!("median_psnr={m:.4}\n")),
        None => s.push_str("median_psnr=identical\n"),
    }
    s.push_str(&format!("mean_ssim={:.6}\n", report.mean_ssim()));
    s
}

pub fn save_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_file(path, report_to_text(report).as_bytes())
}

/// Binary PGM (P5) preview of one band, linearly mapped from [0,1] to u8.
pub fn save_pgm_band<S: Scalar>(path: &Path, cube: &Tensor<S>, band: usize) -> Result<()> {
    if cube.shape().len() != 3 || band >= cube.shape()[2] {
        return Err(Error::InvalidArgument(format!(
            "band {band} out of range for cube {:?}",
            cube.shape()
        )));
    }
    let (w, h, b) = (cube.shape()[0], cube.shape()[1], cube.shape()[2]);
    let mut bytes = format!("P5\n{h} {w}\n255\n").into_bytes();
    let d = cube.data();
    for i in 0..w {
        for j in 0..h {
            let v = d[(i * h + j) * b + band].as_f64().clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    write_file(path, &bytes)
}

/// Plain-text per-band means of ground truth and prediction over a spatial
/// region `[i0..i1) x [j0..j1)`.
pub fn spectral_table<S: Scalar>(
    gt: &Tensor<S>,
    pred: &Tensor<S>,
    region: (usize, usize, usize, usize),
) -> Result<String> {
    if gt.shape() != pred.shape() || gt.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "spectral_table",
            detail: format!("{:?} vs {:?}", gt.shape(), pred.shape()),
        });
    }
    let (w, h, b) = (gt.shape()[0], gt.shape()[1], gt.shape()[2]);
    let (i0, j0, i1, j1) = region;
    if i0 >= i1 || j0 >= j1 || i1 > w || j1 > h {
        return Err(Error::InvalidArgument(format!(
            "region ({i0},{j0})..({i1},{j1}) outside {w}x{h}"
        )));
    }
    let mut out = String::from("band\tgt_mean\tpred_mean\n");
    let count = ((i1 - i0) * (j1 - j0)) as f64;
    for l in 0..b {
        let mut ga = 0.0;
        let mut pa = 0.0;
        for i in i0..i1 {
            for j in j0..j1 {
                ga += gt.data()[(i * h + j) * b + l].as_f64();
                pa += pred.data()[(i * h + j) * b + l].as_f64();
            }
        }
        out.push_str(&format!("{l}\t{:.6}\t{:.6}\n", ga / count, pa / count));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::rng::{rand_normal, Rng};

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn cube_roundtrip_bitwise() {
        let dir = tmpdir();
        let path = dir.path().join("a.hsc");
        let cube = rand_normal::<f32>(&mut Rng::new(1), &[5, 7, 3]).map(|v| v.abs().min(1.0));
        save_cube(&path, &cube).unwrap();
        let back = load_cube::<f32>(&path).unwrap();
        assert_eq!(back.shape(), cube.shape());
        let a: Vec<u32> = cube.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn cube_bad_magic() {
        let dir = tmpdir();
        let path = dir.path().join("bad.hsc");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            load_cube::<f32>(&path).unwrap_err(),
            Error::BadMagic { .. }
        ));
    }

    #[test]
    fn cube_truncation_detected() {
        let dir = tmpdir();
        let path = dir.path().join("t.hsc");
        let cube = Tensor::<f32>::ones(&[4, 4, 2]);
        save_cube(&path, &cube).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_cube::<f32>(&path).unwrap_err(),
            Error::TruncatedPayload { .. }
        ));
    }

    #[test]
    fn cube_trailing_bytes_detected() {
        let dir = tmpdir();
        let path = dir.path().join("t2.hsc");
        let cube = Tensor::<f32>::ones(&[4, 4, 2]);
        save_cube(&path, &cube).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_cube::<f32>(&path).unwrap_err(),
            Error::TrailingBytes(1)
        ));
    }

    #[test]
    fn ckpt_roundtrip_and_offset_checks() {
        let dir = tmpdir();
        let path = dir.path().join("c.fmuckpt");
        let ckpt = CheckpointData::<f32> {
            epoch: 3,
            step: 42,
            adam_step: 42,
            config_hash: "deadbeefdeadbeef".into(),
            config_text: "[train]\nepochs = 3\n".into(),
            rng_key: 123,
            rng_counter: 456,
            tensors: vec![
                CkptTensor {
                    key: "param:w".into(),
                    trainable: true,
                    tensor: rand_normal::<f32>(&mut Rng::new(2), &[3, 4]),
                },
                CkptTensor {
                    key: "adam_m:w".into(),
                    trainable: false,
                    tensor: rand_normal::<f32>(&mut Rng::new(3), &[3, 4]),
                },
                CkptTensor {
                    key: "scalar:rho.0".into(),
                    trainable: true,
                    tensor: Tensor::scalar(1.0),
                },
            ],
        };
        save_ckpt(&path, &ckpt).unwrap();
        let back = load_ckpt::<f32>(&path).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.rng_counter, 456);
        assert_eq!(back.config_text, ckpt.config_text);
        assert_eq!(back.tensors.len(), 3);
        for (a, b) in back.tensors.iter().zip(&ckpt.tensors) {
            assert_eq!(a.key, b.key);
            assert_eq!(a.trainable, b.trainable);
            let av: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bv: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(av, bv);
        }

        // corrupt payload length
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_ckpt::<f32>(&path).unwrap_err();
        assert!(
            matches!(err, Error::TruncatedPayload { .. } | Error::OffsetMismatch(_)),
            "{err:?}"
        );
    }

    #[test]
    fn f64_checkpoint_not_narrowed() {
        let dir = tmpdir();
        let path = dir.path().join("v.fmuckpt");
        let ckpt = CheckpointData::<f64> {
            epoch: 0,
            step: 0,
            adam_step: 0,
            config_hash: "0".into(),
            config_text: String::new(),
            rng_key: 0,
            rng_counter: 0,
            tensors: vec![CkptTensor {
                key: "param:w".into(),
                trainable: true,
                tensor: Tensor::scalar(0.1),
            }],
        };
        save_ckpt(&path, &ckpt).unwrap();
        assert!(load_ckpt::<f64>(&path).is_ok());
        assert!(load_ckpt::<f32>(&path).is_err());
    }

    #[test]
    fn config_parse_sections_and_comments() {
        let text = "# header\n[train]\nepochs = 5 # inline\nseed = 7\n\n[scene]\nwidth = 32\n";
        let doc = ConfigDoc::parse(text).unwrap();
        assert_eq!(doc.sections.len(), 2);
        let train = doc.section("train").unwrap();
        assert_eq!(train, &[("epochs".into(), "5".into()), ("seed".into(), "7".into())]);
        assert!(doc.section("nope").is_none());
        assert!(ConfigDoc::parse("key = 1\n").is_err());
        assert!(ConfigDoc::parse("[a]\njunk line\n").is_err());
    }

    #[test]
    fn config_hash_is_stable() {
        let h1 = config_hash("[train]\nepochs = 5\n");
        let h2 = config_hash("[train]\nepochs = 5\n");
        let h3 = config_hash("[train]\nepochs = 6\n");
        assert_eq!(h1, h2);
        assert_ne!(h1, h3);
        assert_eq!(h1.len(), 16);
    }

    #[test]
    fn pgm_and_spectral_table() {
        let dir = tmpdir();
        let cube = rand_normal::<f32>(&mut Rng::new(4), &[6, 5, 2]).map(|v| v.abs().min(1.0));
        let p = dir.path().join("band0.pgm");
        save_pgm_band(&p, &cube, 0).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n5 6\n255\n"));
        assert_eq!(bytes.len(), b"P5\n5 6\n255\n".len() + 30);
        assert!(save_pgm_band(&p, &cube, 2).is_err());

        let table = spectral_table(&cube, &cube, (0, 0, 3, 3)).unwrap();
        assert!(table.starts_with("band\tgt_mean\tpred_mean\n"));
        assert_eq!(table.lines().count(), 3);
        assert!(spectral_table(&cube, &cube, (2, 2, 2, 3)).is_err());
    }
}
