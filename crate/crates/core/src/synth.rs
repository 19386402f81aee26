//! Synthetic SAR-like glacier scenes and their on-disk layout.
//!
//! A scene is built in a canonical frame (ocean to the right of a wavy
//! front, rock bands along the top and bottom of the land side, an optional
//! NA wedge in the top-left corner) and then turned by a random element of
//! the dihedral group. Intensities are zone levels with a smooth texture,
//! multiplied by exponential speckle, clipped to `[0, 1]` and quantized to
//! 16 bits.
//!
//! Directory layout:
//!
//! ```text
//! header.txt      width=, height=, resolution_m=, id=, tag.<key>=<value>
//! intensity.raw   u16 little-endian, row-major, value/65535
//! zones.raw       u8 row-major labels
//! front.txt       resolution_m header, then row,col per line
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::frontline::{extract_front, FrontSet, ZoneMask, GLACIER, NA, OCEAN, ROCK, ZONE_CLASSES};
use crate::raster::Raster;

pub const MIN_SIDE: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub intensity: Raster<f32>,
    pub zones: Raster<u8>,
    pub resolution_m: f64,
    pub front_gt: FrontSet,
    pub tags: BTreeMap<String, String>,
}

impl Scene {
    pub fn zone_mask(&self) -> ZoneMask {
        ZoneMask {
            labels: self.zones.clone(),
            resolution_m: self.resolution_m,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.zones.dims()
    }
}

/// Mean intensity of each zone before speckle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZoneLevels {
    pub na: f64,
    pub rock: f64,
    pub glacier: f64,
    pub ocean: f64,
}

impl Default for ZoneLevels {
    fn default() -> Self {
        ZoneLevels {
            na: 0.0,
            rock: 0.7,
            glacier: 0.45,
            ocean: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub resolution_m: f64,
    pub levels: ZoneLevels,
    /// Amplitude of the smooth texture added inside each zone.
    pub texture: f64,
    /// 0 disables speckle; 1 is fully developed single-look speckle.
    pub speckle: f64,
    /// Front undulation relative to the scene width.
    pub waviness: f64,
    /// Probability that a scene is a winter scene with mélange.
    pub melange_prob: f64,
    /// Probability of an NA wedge in one corner.
    pub na_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            height: 96,
            width: 96,
            resolution_m: 50.0,
            levels: ZoneLevels::default(),
            texture: 0.05,
            speckle: 0.5,
            waviness: 0.5,
            melange_prob: 0.0,
            na_prob: 0.3,
        }
    }
}

impl SynthConfig {
    /// Nominal glacier/ocean intensity separation.
    pub fn glacier_ocean_contrast(&self) -> f64 {
        self.levels.glacier - self.levels.ocean
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::config(format!(
                "scene size {}x{} is below the {MIN_SIDE}x{MIN_SIDE} minimum",
                self.height, self.width
            )));
        }
        if !(self.resolution_m.is_finite() && self.resolution_m > 0.0) {
            return Err(Error::config("resolution_m must be positive"));
        }
        let l = self.levels;
        for (name, v) in [("na", l.na), ("rock", l.rock), ("glacier", l.glacier), ("ocean", l.ocean)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} level {v} is outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("texture", self.texture),
            ("speckle", self.speckle),
            ("waviness", self.waviness),
            ("melange_prob", self.melange_prob),
            ("na_prob", self.na_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Sum of a few random sinusoids along one axis, amplitudes normalised to `amp`.
struct Wave {
    terms: Vec<(f64, f64, f64)>,
}

impl Wave {
    fn new(rng: &mut ChaCha8Rng, amp: f64, max_freq: f64) -> Self {
        let terms = (0..3)
            .map(|k| {
                let f = rng.random_range(0.5..max_freq.max(0.6));
                let a = amp / (k + 1) as f64 * rng.random_range(0.5..1.0);
                (a, f, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Wave { terms }
    }

    fn at(&self, t: f64) -> f64 {
        self.terms.iter().map(|&(a, f, p)| a * (2.0 * PI * f * t + p).sin()).sum()
    }
}

fn orient<T: Copy>(r: &Raster<T>, k: usize, transpose: bool) -> Raster<T> {
    let r = r.rot90(k);
    if transpose {
        r.transpose()
    } else {
        r
    }
}

/// Generates one scene; the seed determines every bit of the output.
pub fn generate_scene(cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let winter = rng.random_bool(cfg.melange_prob);
    let has_na = rng.random_bool(cfg.na_prob);
    let (k, transpose) = (rng.random_range(0..4usize), rng.random_bool(0.5));

    // The canonical frame is transposed when the output will be, so the final
    // raster has the requested dimensions.
    let (h, w) = if (k % 2 == 1) != transpose {
        (cfg.width, cfg.height)
    } else {
        (cfg.height, cfg.width)
    };
    let (hf, wf) = (h as f64, w as f64);

    let x0 = rng.random_range(0.45..0.65) * wf;
    let front = Wave::new(&mut rng, cfg.waviness * 0.08 * wf, 2.5);
    let top = Wave::new(&mut rng, 0.04 * hf, 1.5);
    let bottom = Wave::new(&mut rng, 0.04 * hf, 1.5);
    let (top0, bottom0) = (rng.random_range(0.08..0.18) * hf, rng.random_range(0.08..0.18) * hf);
    let na_extent = rng.random_range(0.15..0.3) * hf.min(wf);
    let melange_width = rng.random_range(0.1..0.25) * wf;
    let tex_r = Wave::new(&mut rng, 1.0, 4.0);
    let tex_c = Wave::new(&mut rng, 1.0, 4.0);

    let x_front = |r: usize| (x0 + front.at(r as f64 / hf)).clamp(0.2 * wf, wf - 8.0);
    let zones = Raster::from_fn(h, w, |r, c| {
        let cf = c as f64;
        let xf = x_front(r);
        if cf >= xf {
            return OCEAN;
        }
        if has_na && (r as f64 + cf) < na_extent {
            return NA;
        }
        let (rf, t) = (r as f64, cf / wf);
        if rf < top0 + top.at(t) || rf >= hf - bottom0 - bottom.at(t) {
            ROCK
        } else {
            GLACIER
        }
    });

    let l = cfg.levels;
    let intensity = Raster::from_fn(h, w, |r, c| {
        let z = zones.get(r, c);
        let texture = cfg.texture * 0.5 * (tex_r.at(r as f64 / hf) + tex_c.at(c as f64 / wf)) / 1.8;
        match z {
            NA => l.na,
            ROCK => l.rock + texture,
            GLACIER => l.glacier + texture,
            _ if winter && (c as f64 - x_front(r)) < melange_width => l.glacier + texture,
            _ => l.ocean,
        }
    });
    let intensity = Raster::from_vec(
        h,
        w,
        intensity
            .as_slice()
            .iter()
            .map(|&base| {
                let e: f64 = Exp1.sample(&mut rng);
                let n = 1.0 + cfg.speckle * (e - 1.0);
                quantize(base * n)
            })
            .collect(),
    )?;

    let zones = orient(&zones, k, transpose);
    let intensity = orient(&intensity, k, transpose);
    debug_assert_eq!(zones.dims(), (cfg.height, cfg.width));
    let front_gt = extract_front(&ZoneMask {
        labels: zones.clone(),
        resolution_m: cfg.resolution_m,
    });

    let mut tags = BTreeMap::new();
    tags.insert("season".to_string(), if winter { "winter" } else { "summer" }.to_string());
    Ok(Scene {
        id: format!("synth-{}", cfg.seed),
        intensity,
        zones,
        resolution_m: cfg.resolution_m,
        front_gt,
        tags,
    })
}

/// Clips to `[0, 1]` and rounds to the nearest 16-bit level.
pub fn quantize(v: f64) -> f32 {
    let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    q as f32 / 65535.0
}

pub const HEADER_FILE: &str = "header.txt";
pub const INTENSITY_FILE: &str = "intensity.raw";
pub const ZONES_FILE: &str = "zones.raw";
pub const FRONT_FILE: &str = "front.txt";

/// Scene metadata as stored in `header.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneHeader {
    pub width: usize,
    pub height: usize,
    pub resolution_m: f64,
    pub id: String,
    pub tags: BTreeMap<String, String>,
}

impl SceneHeader {
    pub fn of(s: &Scene) -> Self {
        let (height, width) = s.dims();
        SceneHeader {
            width,
            height,
            resolution_m: s.resolution_m,
            id: s.id.clone(),
            tags: s.tags.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "width={}\nheight={}\nresolution_m={}\nid={}\n",
            self.width, self.height, self.resolution_m, self.id
        );
        for (k, v) in &self.tags {
            writeln!(out, "tag.{k}={v}").expect("string write");
        }
        out
    }

    pub fn parse(text: &str, file: &Path) -> Result<Self> {
        let mut fields = BTreeMap::new();
        let mut tags = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(file, line, "expected key=value"))?;
            match k.strip_prefix("tag.") {
                Some(tag) => {
                    tags.insert(tag.to_string(), v.to_string());
                }
                None => {
                    fields.insert(k.to_string(), v.to_string());
                }
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::parse(file, k, "missing"));
        let dim = |k: &str| -> Result<usize> {
            get(k)?
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::parse(file, k, "not a positive integer"))
        };
        let resolution_m = get("resolution_m")?
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v > 0.0)
            .ok_or_else(|| Error::parse(file, "resolution_m", "not a positive number"))?;
        Ok(SceneHeader {
            width: dim("width")?,
            height: dim("height")?,
            resolution_m,
            id: get("id")?.clone(),
            tags,
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let hp = dir.join(HEADER_FILE);
        let text = String::from_utf8(read_file(&hp)?).map_err(|_| Error::parse(&hp, "header", "invalid UTF-8"))?;
        Self::parse(&text, &hp)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(HEADER_FILE), self.to_text().as_bytes())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_zones(zones: &Raster<u8>, dir: &Path) -> Result<()> {
    write_file(&dir.join(ZONES_FILE), zones.as_slice())
}

pub fn read_zones(dir: &Path, header: &SceneHeader) -> Result<Raster<u8>> {
    let (h, w) = (header.height, header.width);
    let zp = dir.join(ZONES_FILE);
    let zraw = read_file(&zp)?;
    if zraw.len() != h * w {
        return Err(Error::parse(&zp, "zones", format!("{} bytes, expected {}", zraw.len(), h * w)));
    }
    if let Some(i) = zraw.iter().position(|&v| v as usize >= ZONE_CLASSES) {
        return Err(Error::parse(&zp, "zones", format!("label {} at index {i}", zraw[i])));
    }
    Raster::from_vec(h, w, zraw)
}

pub fn write_front(front: &FrontSet, dir: &Path) -> Result<()> {
    write_file(&dir.join(FRONT_FILE), front.to_text().as_bytes())
}

pub fn read_front(dir: &Path, header: &SceneHeader) -> Result<FrontSet> {
    let (h, w) = (header.height, header.width);
    let fp = dir.join(FRONT_FILE);
    let front = FrontSet::read(&fp)?;
    if let Some(&(r, c)) = front.pixels.iter().find(|&&(r, c)| r >= h || c >= w) {
        return Err(Error::parse(&fp, "front", format!("pixel ({r},{c}) outside {h}x{w}")));
    }
    Ok(front)
}

pub fn write_scene(s: &Scene, dir: &Path) -> Result<()> {
    SceneHeader::of(s).write(dir)?;
    let raw: Vec<u8> = s
        .intensity
        .as_slice()
        .iter()
        .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_le_bytes())
        .collect();
    write_file(&dir.join(INTENSITY_FILE), &raw)?;
    write_zones(&s.zones, dir)?;
    write_front(&s.front_gt, dir)
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let header = SceneHeader::read(dir)?;
    let (h, w) = (header.height, header.width);
    let ip = dir.join(INTENSITY_FILE);
    let raw = read_file(&ip)?;
    if raw.len() != 2 * h * w {
        return Err(Error::parse(&ip, "intensity", format!("{} bytes, expected {}", raw.len(), 2 * h * w)));
    }
    let intensity = Raster::from_vec(
        h,
        w,
        raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as f32 / 65535.0).collect(),
    )?;
    let zones = read_zones(dir, &header)?;
    let front_gt = read_front(dir, &header)?;
    Ok(Scene {
        id: header.id,
        intensity,
        zones,
        resolution_m: header.resolution_m,
        front_gt,
        tags: header.tags,
    })
}

/// Scene directories directly below `root`, sorted by name.
pub fn list_scene_dirs(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.join(HEADER_FILE).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}
