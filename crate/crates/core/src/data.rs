//! Dataset handling: manifest parsing, portable image I/O, deterministic
//! splitting, horizontal-flip augmentation, and a synthetic dataset whose
//! labels are closed-form functions of the image content.

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};
use crate::head::FeatureMap;
use crate::loss::VadLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};

/// One record of a manifest: a path (resolved by the caller) plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: VadLabel,
}

/// A loaded training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: SampleInput,
    pub label: VadLabel,
}

/// Samples carry either a raw image or a precomputed feature map.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleInput {
    Image(ImageTensor),
    Features(FeatureMap),
}

/// Train/val/test fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        if train <= 0.0 || val <= 0.0 || test <= 0.0 {
            return Err(Error::Config(format!(
                "split fractions must be positive, got ({train}, {val}, {test})"
            )));
        }
        if ((train + val + test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {}",
                train + val + test
            )));
        }
        Ok(SplitSpec {
            train,
            val,
            test,
            seed,
        })
    }
}

/// The three disjoint sample sets a split produces.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Parse `path,v,a,d` lines. Labels must parse as decimals in [0,1]; blank
/// lines are skipped so trailing newlines are harmless.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                what: format!("expected 4 comma-separated fields, got {}", fields.len()),
            });
        }
        let path = fields[0].trim();
        if path.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                what: "empty path".into(),
            });
        }
        let mut vals = [0.0f64; 3];
        for (slot, field) in vals.iter_mut().zip(&fields[1..]) {
            *slot = field.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                what: format!("'{}' is not a decimal number", field.trim()),
            })?;
        }
        let label = VadLabel::new(vals[0], vals[1], vals[2]).map_err(|e| Error::Validation {
            line: line_no,
            what: e.to_string(),
        })?;
        out.push(ManifestEntry {
            path: path.to_string(),
            label,
        });
    }
    Ok(out)
}

/// Serialize entries back to manifest text.
pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9}\n",
            e.path, e.label.v, e.label.a, e.label.d
        ));
    }
    out
}

// ── portable anymap I/O ─────────────────────────────────────────────────

struct TokenReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TokenReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        TokenReader { bytes, pos: 0 }
    }

    // skips whitespace and '#' comments through end of line
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format {
                what: "unexpected end of header".into(),
                offset: Some(start as u64),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Format {
            what: "non-ascii header token".into(),
            offset: Some(start as u64),
        })
    }

    fn number(&mut self) -> Result<usize> {
        let at = self.pos;
        let tok = self.token()?;
        tok.parse().map_err(|_| Error::Format {
            what: format!("'{tok}' is not a number"),
            offset: Some(at as u64),
        })
    }
}

/// Load a PGM (P2/P5) or PPM (P3/P6) image, scaled to [0,1].
pub fn load_image(source: &mut impl Read) -> Result<ImageTensor> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut r = TokenReader::new(&bytes);
    let magic = r.token()?;
    let (channels, binary) = match magic {
        "P2" => (1, false),
        "P3" => (3, false),
        "P5" => (1, true),
        "P6" => (3, true),
        other => {
            return Err(Error::Format {
                what: format!("unsupported magic '{other}' (expected P2, P3, P5, or P6)"),
                offset: Some(0),
            })
        }
    };
    let width = r.number()?;
    let height = r.number()?;
    let maxval = r.number()?;
    if width == 0 || height == 0 {
        return Err(Error::Format {
            what: format!("bad dimensions {width}x{height}"),
            offset: Some(r.pos as u64),
        });
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format {
            what: format!("unsupported maxval {maxval} (1..=255)"),
            offset: Some(r.pos as u64),
        });
    }
    let count = width * height * channels;
    let mut interleaved = Vec::with_capacity(count);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
            return Err(Error::Format {
                what: "missing separator before binary raster".into(),
                offset: Some(r.pos as u64),
            });
        }
        let start = r.pos + 1;
        if bytes.len() < start + count {
            return Err(Error::Format {
                what: format!(
                    "raster truncated: need {count} bytes, found {}",
                    bytes.len().saturating_sub(start)
                ),
                offset: Some(bytes.len() as u64),
            });
        }
        for &b in &bytes[start..start + count] {
            interleaved.push(b as f64 / maxval as f64);
        }
    } else {
        for _ in 0..count {
            let at = r.pos;
            let v = r.number()?;
            if v > maxval {
                return Err(Error::Format {
                    what: format!("sample {v} exceeds maxval {maxval}"),
                    offset: Some(at as u64),
                });
            }
            interleaved.push(v as f64 / maxval as f64);
        }
    }
    // de-interleave into channel-major storage
    let mut values = vec![0.0f64; count];
    let plane = width * height;
    for p in 0..plane {
        for c in 0..channels {
            values[c * plane + p] = interleaved[p * channels + c];
        }
    }
    ImageTensor::new(channels, height, width, values)
}

/// Write a binary PGM (1 channel) or PPM (3 channels) with maxval 255.
pub fn save_image(img: &ImageTensor, sink: &mut impl Write) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    write!(sink, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    let plane = img.width * img.height;
    let mut raster = Vec::with_capacity(plane * img.channels);
    for p in 0..plane {
        for c in 0..img.channels {
            let v = (img.values[c * plane + p] * 255.0).round().clamp(0.0, 255.0);
            raster.push(v as u8);
        }
    }
    sink.write_all(&raster)?;
    Ok(())
}

pub fn load_image_file(path: &std::path::Path) -> Result<ImageTensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load_image(&mut f)
}

pub fn save_image_file(img: &ImageTensor, path: &std::path::Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_image(img, &mut f)
}

// ── splitting and augmentation ──────────────────────────────────────────

/// Deterministic index partition: seeded shuffle, floor-sized val/test,
/// remainder to train.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n < 3 {
        return Err(Error::Config(format!(
            "need at least 3 samples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_val = (n as f64 * spec.val).floor() as usize;
    let n_test = (n as f64 * spec.test).floor() as usize;
    let n_train = n - n_val - n_test;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

/// Partition samples by cloning along [`split_indices`].
pub fn split<X: Clone>(samples: &[X], spec: &SplitSpec) -> Result<(Vec<X>, Vec<X>, Vec<X>)> {
    let (ti, vi, si) = split_indices(samples.len(), spec)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&ti), pick(&vi), pick(&si)))
}

/// Outcome of the augmentation coin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coin {
    Heads,
    Tails,
}

/// Mirror the image columns on heads; identity on tails.
pub fn flip_augment(img: &ImageTensor, coin: Coin) -> ImageTensor {
    match coin {
        Coin::Tails => img.clone(),
        Coin::Heads => {
            let (c, h, w) = (img.channels, img.height, img.width);
            let mut values = vec![0.0f64; img.values.len()];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        values[ch * h * w + y * w + x] =
                            img.values[ch * h * w + y * w + (w - 1 - x)];
                    }
                }
            }
            ImageTensor {
                channels: c,
                height: h,
                width: w,
                values,
            }
        }
    }
}

// ── synthetic dataset ───────────────────────────────────────────────────
//
// Each image is a filled axis-aligned bright rectangle over a mid-gray
// textured background. The labels are closed-form functions of the image:
//   valence   = rectangle mean brightness
//   arousal   = rectangle area fraction rescaled to [0,1]
//   dominance = rectangle vertical-center position in [0,1]
// Horizontal flips leave all three labels unchanged.

pub const SYNTH_BG_MIN: f64 = 0.45;
pub const SYNTH_BG_MAX: f64 = 0.55;
pub const SYNTH_FILL_MIN: f64 = 0.6;
pub const SYNTH_FILL_MAX: f64 = 1.0;
/// Rectangle side, as a fraction of the image side.
pub const SYNTH_SIDE_MIN_FRAC: f64 = 0.1875;
pub const SYNTH_SIDE_MAX_FRAC: f64 = 0.5;
/// Area-fraction bounds implied by the side bounds; arousal is rescaled
/// against these.
pub const SYNTH_AREA_MIN: f64 = SYNTH_SIDE_MIN_FRAC * SYNTH_SIDE_MIN_FRAC;
pub const SYNTH_AREA_MAX: f64 = SYNTH_SIDE_MAX_FRAC * SYNTH_SIDE_MAX_FRAC;
/// Brightness separating rectangle from background, with margin on both
/// sides even after 8-bit quantization.
pub const SYNTH_BRIGHT_THRESHOLD: f64 = 0.575;

/// The rectangle a synthetic image was built around, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

fn synth_labels(rect: &SynthRect, fill: f64, size: usize) -> VadLabel {
    let area_frac = (rect.width * rect.height) as f64 / (size * size) as f64;
    let arousal = (area_frac - SYNTH_AREA_MIN) / (SYNTH_AREA_MAX - SYNTH_AREA_MIN);
    let dominance = (2 * rect.y0 + rect.height - 1) as f64 / (2 * (size - 1)) as f64;
    VadLabel {
        v: fill,
        a: arousal.clamp(0.0, 1.0),
        d: dominance,
    }
}

/// Generate `count` synthetic samples. Same seed, same dataset, bit for bit.
pub fn synth_generate(count: usize, seed: u64, image_size: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Config("synthetic count must be at least 1".into()));
    }
    if image_size < 16 {
        return Err(Error::Config(format!(
            "synthetic image size must be at least 16, got {image_size}"
        )));
    }
    let s = image_size;
    let side_min = ((s as f64) * SYNTH_SIDE_MIN_FRAC).ceil() as usize;
    let side_max = ((s as f64) * SYNTH_SIDE_MAX_FRAC).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let fill = SYNTH_FILL_MIN + rng.gen::<f64>() * (SYNTH_FILL_MAX - SYNTH_FILL_MIN);
        let rw = rng.gen_range(side_min..=side_max);
        let rh = rng.gen_range(side_min..=side_max);
        let x0 = rng.gen_range(0..=s - rw);
        let y0 = rng.gen_range(0..=s - rh);
        let rect = SynthRect {
            x0,
            y0,
            width: rw,
            height: rh,
        };
        let mut plane = vec![0.0f64; s * s];
        for p in plane.iter_mut() {
            *p = SYNTH_BG_MIN + rng.gen::<f64>() * (SYNTH_BG_MAX - SYNTH_BG_MIN);
        }
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                plane[y * s + x] = fill;
            }
        }
        let mut values = Vec::with_capacity(3 * s * s);
        for _ in 0..3 {
            values.extend_from_slice(&plane);
        }
        let image = ImageTensor::new(3, s, s, values)?;
        out.push(Sample {
            id: format!("synth-{i:05}"),
            input: SampleInput::Image(image),
            label: synth_labels(&rect, fill, s),
        });
    }
    Ok(out)
}

/// Recover the bright rectangle from a synthetic image's first channel.
pub fn locate_rectangle(img: &ImageTensor) -> Option<SynthRect> {
    let (h, w) = (img.height, img.width);
    let plane = &img.values[..h * w];
    let (mut x_min, mut x_max, mut y_min, mut y_max) = (w, 0usize, h, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if plane[y * w + x] >= SYNTH_BRIGHT_THRESHOLD {
                any = true;
                x_min = x_min.min(x);
                x_max = x_max.max(x);
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }
        }
    }
    if !any {
        return None;
    }
    Some(SynthRect {
        x0: x_min,
        y0: y_min,
        width: x_max - x_min + 1,
        height: y_max - y_min + 1,
    })
}

/// Recompute the label from pixels alone; the independent check on stored
/// synthetic labels.
pub fn recompute_synth_label(img: &ImageTensor) -> Option<VadLabel> {
    let rect = locate_rectangle(img)?;
    let (h, w) = (img.height, img.width);
    let plane = &img.values[..h * w];
    let mut total = 0.0;
    for y in rect.y0..rect.y0 + rect.height {
        for x in rect.x0..rect.x0 + rect.width {
            total += plane[y * w + x];
        }
    }
    let mean = total / (rect.width * rect.height) as f64;
    let mut label = synth_labels(&rect, mean, w);
    label.v = label.v.clamp(0.0, 1.0);
    Some(label)
}
