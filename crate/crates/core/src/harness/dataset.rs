//! Dataset splits: manifest ingestion, bilinear resizing and the synthetic
//! gamut dataset.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::config::SplitCounts;
use super::{stream, sub_seed};
use crate::error::{Error, Result};
use crate::label::{Label, BONA_FIDE_SPECIES};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Dev,
    Test,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Train, Role::Dev, Role::Test];
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Dev => "dev",
            Role::Test => "test",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Role::Train),
            "dev" | "devel" | "development" => Ok(Role::Dev),
            "test" => Ok(Role::Test),
            other => Err(Error::invalid("Role::from_str", format!("unknown split role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// `(height, width, 3)` with values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: Label,
    pub species: String,
    pub group: Option<String>,
    /// Position within its split.
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub role: Role,
    pub records: Vec<Record>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All images stacked into `(n, height, width, 3)`.
    pub fn images(&self) -> Result<Tensor> {
        Tensor::stack(self.records.iter().map(|r| &r.pixels))
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.id).collect()
    }

    pub fn count(&self, label: Label, species: &str) -> usize {
        self.records
            .iter()
            .filter(|r| r.label == label && r.species == species)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub dev: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, role: Role) -> &Split {
        match role {
            Role::Train => &self.train,
            Role::Dev => &self.dev,
            Role::Test => &self.test,
        }
    }

    pub fn splits(&self) -> [&Split; 3] {
        [&self.train, &self.dev, &self.test]
    }
}

/// Bilinear resampling of an `(h, w, c)` image with half-pixel centers and
/// no antialiasing.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    image.expect_rank("resize_bilinear", 3)?;
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize_bilinear", "target extent must be positive"));
    }
    let (sh, sw, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if (sh, sw) == (height, width) {
        return Ok(image.clone());
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = axis(height, sh);
    let cols = axis(width, sw);
    let src = image.data();
    let at = |y: usize, x: usize, k: usize| src[(y * sw + x) * c + k];
    let mut out = Tensor::zeros(&[height, width, c]);
    let data = out.data_mut();
    for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for k in 0..c {
                let top = at(y0, x0, k) * (1.0 - fx) + at(y0, x1, k) * fx;
                let bottom = at(y1, x0, k) * (1.0 - fx) + at(y1, x1, k) * fx;
                data[(y * width + x) * c + k] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Decodes an image file into `(h, w, 3)` values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let rgb = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    Tensor::new(
        vec![h as usize, w as usize, 3],
        rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    )
}

/// Writes `(h, w, 3)` values, clamped to `[0, 1]`, as an 8-bit PNG.
pub fn save_png(path: &Path, pixels: &Tensor) -> Result<()> {
    pixels.expect_rank("save_png", 3)?;
    let (h, w) = (pixels.shape()[0] as u32, pixels.shape()[1] as u32);
    let raw: Vec<u8> = pixels
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buffer = image::RgbImage::from_raw(w, h, raw).expect("buffer matches extent");
    buffer.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// One parsed manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub role: Role,
    pub label: Label,
    pub species: String,
    pub group: Option<String>,
}

/// Tab-separated `path role label species group_id`; `#` starts a comment
/// line and `-` marks a missing group. Bona-fide species are normalized.
pub fn parse_manifest(text: &str, source: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: source.into(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() {
            return Err(err("empty image path".into()));
        }
        let role = fields[1].parse().map_err(|e: Error| err(e.to_string()))?;
        let label: Label = fields[2].parse().map_err(|e: Error| err(e.to_string()))?;
        let species = match label {
            Label::BonaFide => BONA_FIDE_SPECIES.to_string(),
            Label::Attack if fields[3].is_empty() || fields[3] == "-" => {
                return Err(err("attack entry without species".into()))
            }
            Label::Attack => fields[3].to_string(),
        };
        out.push(ManifestEntry {
            path: fields[0].to_string(),
            role,
            label,
            species,
            group: (fields[4] != "-" && !fields[4].is_empty()).then(|| fields[4].to_string()),
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::from("# path\trole\tlabel\tspecies\tgroup_id\n");
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.path,
            e.role,
            e.label,
            e.species,
            e.group.as_deref().unwrap_or("-")
        ));
    }
    out
}

/// Loads every manifest entry relative to `root`, resized to
/// `image_size x image_size`, keeping manifest order within each split.
pub fn ingest_directory(root: &Path, manifest: &Path, image_size: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest)?;
    let entries = parse_manifest(&text, &manifest.display().to_string())?;
    let pixels = entries
        .par_iter()
        .map(|e| resize_bilinear(&load_image(&root.join(&e.path))?, image_size, image_size))
        .collect::<Result<Vec<_>>>()?;
    let mut splits = Role::ALL.map(|role| Split {
        role,
        records: Vec::new(),
    });
    for (e, px) in entries.into_iter().zip(pixels) {
        let split = &mut splits[e.role as usize];
        split.records.push(Record {
            pixels: px,
            label: e.label,
            species: e.species,
            group: e.group,
            id: split.records.len(),
        });
    }
    let [train, dev, test] = splits;
    Ok(Dataset { train, dev, test })
}

pub const PRINT_SPECIES: &str = "print";
pub const REPLAY_SPECIES: &str = "replay";
/// Saturation multipliers applied to attack presentations.
pub const PRINT_SATURATION: f64 = 0.5;
pub const REPLAY_SATURATION: f64 = 0.7;
/// Consecutive records of one class that share a base field and group id.
pub const FRAMES_PER_CLIP: usize = 4;
const GRID: usize = 4;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// HSV saturation `(max - min) / max` of one RGB pixel.
pub fn saturation(rgb: &[f64]) -> f64 {
    let max = rgb.iter().copied().fold(f64::MIN, f64::max);
    let min = rgb.iter().copied().fold(f64::MAX, f64::min);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

pub fn mean_saturation(pixels: &Tensor) -> f64 {
    let px: Vec<f64> = pixels.data().chunks(3).map(saturation).collect();
    px.iter().sum::<f64>() / px.len() as f64
}

/// Low-resolution hue/saturation/value control grid of one clip.
struct ClipField {
    hue: [f64; GRID * GRID],
    sat: [f64; GRID * GRID],
    val: [f64; GRID * GRID],
}

impl ClipField {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let base_hue: f64 = rng.random();
        let base_sat: f64 = rng.random_range(0.15..1.0);
        let base_val: f64 = rng.random_range(0.35..0.95);
        let mut field = Self {
            hue: [0.0; GRID * GRID],
            sat: [0.0; GRID * GRID],
            val: [0.0; GRID * GRID],
        };
        for k in 0..GRID * GRID {
            field.hue[k] = base_hue + rng.random_range(-0.08..0.08);
            field.sat[k] = (base_sat + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0);
            field.val[k] = (base_val + rng.random_range(-0.1..0.1)).clamp(0.05, 1.0);
        }
        field
    }

    fn render(&self, size: usize, hue_shift: f64, sat_scale: f64) -> Tensor {
        let grid = |values: &[f64; GRID * GRID]| {
            resize_bilinear(&Tensor::new(vec![GRID, GRID, 1], values.to_vec()).expect("grid"), size, size)
                .expect("positive size")
        };
        let (h, s, v) = (grid(&self.hue), grid(&self.sat), grid(&self.val));
        let mut out = Tensor::zeros(&[size, size, 3]);
        for (k, px) in out.data_mut().chunks_mut(3).enumerate() {
            let rgb = hsv_to_rgb(h.data()[k] + hue_shift, (s.data()[k] * sat_scale).clamp(0.0, 1.0), v.data()[k]);
            px.copy_from_slice(&rgb);
        }
        out
    }
}

/// Species-specific surface texture added after color rendering.
fn add_texture(pixels: &mut Tensor, species: &str, rng: &mut ChaCha8Rng) {
    let size = pixels.shape()[1];
    match species {
        PRINT_SPECIES => {
            let grain = Normal::new(0.0, 0.04).expect("valid std");
            for px in pixels.data_mut().chunks_mut(3) {
                let g = grain.sample(rng);
                px.iter_mut().for_each(|v| *v += g);
            }
        }
        REPLAY_SPECIES => {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let noise = Normal::new(0.0, 0.01).expect("valid std");
            for (k, px) in pixels.data_mut().chunks_mut(3).enumerate() {
                let row = (k / size) as f64;
                let line = 0.05 * (row * std::f64::consts::TAU / 3.0 + phase).sin();
                px[0] += line + noise.sample(rng);
                px[1] += line + noise.sample(rng);
                px[2] += line + 0.02 + noise.sample(rng);
            }
        }
        _ => {
            let noise = Normal::new(0.0, 0.01).expect("valid std");
            pixels.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
        }
    }
    pixels.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn synth_split(role: Role, counts: SplitCounts, size: usize, seed: u64) -> Split {
    let classes = [
        (Label::BonaFide, BONA_FIDE_SPECIES, 1.0, counts.bona_fide),
        (Label::Attack, PRINT_SPECIES, PRINT_SATURATION, counts.print),
        (Label::Attack, REPLAY_SPECIES, REPLAY_SATURATION, counts.replay),
    ];
    let plan: Vec<(usize, usize)> = classes
        .iter()
        .enumerate()
        .flat_map(|(c, cls)| (0..cls.3).map(move |k| (c, k)))
        .collect();
    let records: Vec<Record> = plan
        .par_iter()
        .enumerate()
        .map(|(id, &(c, k))| {
            let (label, species, sat_scale, _) = classes[c];
            let clip = k / FRAMES_PER_CLIP;
            let mut clip_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, (c as u64) << 32 | clip as u64));
            let field = ClipField::draw(&mut clip_rng);
            let mut frame_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1 << 62 | (c as u64) << 32 | k as u64));
            let mut pixels = field.render(size, frame_rng.random_range(-0.02..0.02), sat_scale);
            add_texture(&mut pixels, species, &mut frame_rng);
            Record {
                pixels,
                label,
                species: species.to_string(),
                group: Some(format!("{role}-{species}-{clip:04}")),
                id,
            }
        })
        .collect();
    Split { role, records }
}

/// Synthetic gamut dataset; each split draws from its own seed stream so the
/// splits share no clips.
pub fn synth_dataset(counts: [SplitCounts; 3], image_size: usize, seed: u64) -> Result<Dataset> {
    if image_size < 2 {
        return Err(Error::invalid("synth_dataset", "image size must be at least 2"));
    }
    for (role, c) in Role::ALL.iter().zip(&counts) {
        if c.bona_fide == 0 || c.print + c.replay == 0 {
            return Err(Error::invalid(
                "synth_dataset",
                format!("{role} split needs bona-fide and attack samples, got {c:?}"),
            ));
        }
    }
    let [train, dev, test] =
        [0, 1, 2].map(|i| synth_split(Role::ALL[i], counts[i], image_size, sub_seed(seed, stream::DATA + i as u64)));
    Ok(Dataset { train, dev, test })
}

/// Writes every record as PNG under `root` with a manifest next to them.
pub fn export_dataset(data: &Dataset, root: &Path) -> Result<std::path::PathBuf> {
    let mut entries = Vec::new();
    for split in data.splits() {
        let dir = root.join(split.role.to_string());
        std::fs::create_dir_all(&dir)?;
        for r in &split.records {
            let rel = format!("{}/{:05}_{}.png", split.role, r.id, r.species);
            save_png(&root.join(&rel), &r.pixels)?;
            entries.push(ManifestEntry {
                path: rel,
                role: split.role,
                label: r.label,
                species: r.species.clone(),
                group: r.group.clone(),
            });
        }
    }
    let manifest = root.join("manifest.tsv");
    std::fs::write(&manifest, format_manifest(&entries))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn counts(n: usize) -> [SplitCounts; 3] {
        [SplitCounts::balanced(n); 3]
    }

    #[test]
    fn nearest_upsample_round_trips() {
        let img = random_tensor(&[5, 7, 3], 1, 0.5).map(|v| v + 0.5);
        let up = Tensor::from_fn(&[10, 14, 3], |i| {
            let (y, x, c) = (i / 42, (i / 3) % 14, i % 3);
            img.data()[((y / 2) * 7 + x / 2) * 3 + c]
        });
        let down = resize_bilinear(&up, 5, 7).unwrap();
        assert!(down.max_abs_diff(&img) <= 1.0 / 255.0);
    }

    #[test]
    fn constant_image_stays_constant() {
        let white = Tensor::full(&[9, 13, 3], 1.0);
        let r = resize_bilinear(&white, 4, 4).unwrap();
        assert!(r.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn manifest_parsing() {
        let text = "# header\na.png\ttrain\tbonafide\treal\tv1\nb.png\tdev\tattack\tprint\t-\n";
        let e = parse_manifest(text, "m").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].species, BONA_FIDE_SPECIES);
        assert_eq!((e[1].role, e[1].group.clone()), (Role::Dev, None));
        match parse_manifest("a.png\ttrain\tbonafide\n", "m.tsv") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_manifest("a.png\tholdout\tattack\tprint\t-\n", "m").is_err());
        assert!(parse_manifest("a.png\ttrain\tattack\t-\t-\n", "m").is_err());
    }

    #[test]
    fn synth_is_deterministic_and_counted() {
        let a = synth_dataset(counts(12), 8, 3).unwrap();
        assert_eq!(a, synth_dataset(counts(12), 8, 3).unwrap());
        assert_ne!(a.train, synth_dataset(counts(12), 8, 4).unwrap().train);
        assert_eq!(a.train.count(Label::BonaFide, BONA_FIDE_SPECIES), 6);
        assert_eq!(a.train.count(Label::Attack, PRINT_SPECIES), 3);
        assert_eq!(a.train.count(Label::Attack, REPLAY_SPECIES), 3);
        assert_ne!(a.train.records[0].pixels, a.dev.records[0].pixels);
        assert!(a.train.records.iter().all(|r| r.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn bona_fide_more_saturated() {
        let d = synth_dataset([SplitCounts { bona_fide: 100, print: 100, replay: 100 }; 3], 16, 11).unwrap();
        let mean = |species: &str| {
            let rs: Vec<_> = d.train.records.iter().filter(|r| r.species == species).collect();
            rs.iter().map(|r| mean_saturation(&r.pixels)).sum::<f64>() / rs.len() as f64
        };
        let bona = mean(BONA_FIDE_SPECIES);
        assert!(bona > mean(PRINT_SPECIES) && bona > mean(REPLAY_SPECIES));
    }

    #[test]
    fn export_then_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_dataset(counts(4), 8, 5).unwrap();
        let manifest = export_dataset(&data, dir.path()).unwrap();
        let back = ingest_directory(dir.path(), &manifest, 8).unwrap();
        assert_eq!(back.train.len(), 4);
        for (a, b) in data.test.records.iter().zip(&back.test.records) {
            assert!(a.pixels.max_abs_diff(&b.pixels) <= 0.5 / 255.0 + 1e-12);
            assert_eq!((a.label, &a.species, &a.group), (b.label, &b.species, &b.group));
        }
    }

    #[test]
    fn white_png_scales_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.png");
        save_png(&path, &Tensor::full(&[3, 5, 3], 1.0)).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.shape(), &[3, 5, 3]);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unreadable_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.tsv"), "missing.png\ttrain\tattack\tprint\t-\n").unwrap();
        let err = ingest_directory(dir.path(), &dir.path().join("m.tsv"), 8).unwrap_err();
        assert!(err.to_string().contains("missing.png"), "{err}");
    }
}
