//! Post-processing from zone masks to calving-front pixels: connected
//! components, single-ocean retention, and glacier/ocean boundary extraction.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const NA: u8 = 0;
pub const ROCK: u8 = 1;
pub const GLACIER: u8 = 2;
pub const OCEAN: u8 = 3;
pub const ZONE_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Connectivity used by the component analysis and the front adjacency test.
pub const CONNECTIVITY: Connectivity = Connectivity::Four;

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

fn neighbours(r: usize, c: usize, h: usize, w: usize, conn: Connectivity) -> impl Iterator<Item = (usize, usize)> {
    conn.offsets().iter().filter_map(move |&(dr, dc)| {
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then_some((nr as usize, nc as usize))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZoneMask {
    pub labels: Raster<u8>,
    pub resolution_m: f64,
}

impl ZoneMask {
    pub fn new(labels: Raster<u8>, resolution_m: f64) -> Result<Self> {
        if let Some(index) = labels.as_slice().iter().position(|&v| v as usize >= ZONE_CLASSES) {
            return Err(Error::Label {
                value: labels.as_slice()[index],
                index,
                classes: ZONE_CLASSES,
            });
        }
        Ok(ZoneMask { labels, resolution_m })
    }

    /// Restricts the mask to a bounding box.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<ZoneMask> {
        let (rh, rw) = self.labels.dims();
        if top + h > rh || left + w > rw || h == 0 || w == 0 {
            return Err(Error::Geometry(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {rh}x{rw}"
            )));
        }
        Ok(ZoneMask {
            labels: self.labels.window(top as isize, left as isize, h, w, NA),
            resolution_m: self.resolution_m,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontSet {
    pub pixels: BTreeSet<(usize, usize)>,
    pub resolution_m: f64,
}

impl FrontSet {
    pub fn new(pixels: impl IntoIterator<Item = (usize, usize)>, resolution_m: f64) -> Self {
        FrontSet {
            pixels: pixels.into_iter().collect(),
            resolution_m,
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Header `resolution_m=<value>` then one `row,col` per line, sorted.
    pub fn to_text(&self) -> String {
        let mut s = format!("resolution_m={}\n", self.resolution_m);
        for (r, c) in &self.pixels {
            writeln!(s, "{r},{c}").expect("string write");
        }
        s
    }

    pub fn from_text(text: &str, file: &Path) -> Result<FrontSet> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
        let resolution_m = header
            .strip_prefix("resolution_m=")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|v| v.is_finite() && *v > 0.0)
            .ok_or_else(|| Error::parse(file, "resolution_m", format!("bad header `{header}`")))?;
        let mut pixels = BTreeSet::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let field = format!("line {}", i + 1);
            let (r, c) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(file, field.clone(), format!("expected `row,col`, got `{line}`")))?;
            let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::parse(file, field.clone(), format!("`{v}` is not a pixel index")));
            pixels.insert((parse(r)?, parse(c)?));
        }
        Ok(FrontSet { pixels, resolution_m })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<FrontSet> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FrontSet::from_text(&text, path)
    }
}

/// Component labels (0 = background, components numbered from 1 in scan
/// order of their first pixel) and their sizes (`sizes[k - 1]` for label k).
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub labels: Raster<u32>,
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

pub fn connected_components(mask: &Raster<bool>, conn: Connectivity) -> Components {
    let (h, w) = mask.dims();
    let mut labels = Raster::filled(h, w, 0u32);
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) || labels.get(r, c) != 0 {
                continue;
            }
            let id = sizes.len() as u32 + 1;
            labels.set(r, c, id);
            queue.push_back((r, c));
            let mut size = 0;
            while let Some((pr, pc)) = queue.pop_front() {
                size += 1;
                for (nr, nc) in neighbours(pr, pc, h, w, conn) {
                    if mask.get(nr, nc) && labels.get(nr, nc) == 0 {
                        labels.set(nr, nc, id);
                        queue.push_back((nr, nc));
                    }
                }
            }
            sizes.push(size);
        }
    }
    Components { labels, sizes }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retained {
    pub mask: ZoneMask,
    /// Set when the input held no ocean pixel; the mask is then unchanged.
    pub no_ocean: bool,
}

/// Keeps the largest ocean component (ties: lowest label) and relabels every
/// other ocean pixel as glacier.
pub fn retain_ocean(z: &ZoneMask) -> Retained {
    let ocean = z.labels.map(|v| v == OCEAN);
    let comps = connected_components(&ocean, CONNECTIVITY);
    if comps.count() == 0 {
        return Retained {
            mask: z.clone(),
            no_ocean: true,
        };
    }
    let mut keep = 1u32;
    for (i, &s) in comps.sizes.iter().enumerate() {
        if s > comps.sizes[keep as usize - 1] {
            keep = i as u32 + 1;
        }
    }
    let mut labels = z.labels.clone();
    for (v, &id) in labels.as_mut_slice().iter_mut().zip(comps.labels.as_slice()) {
        if id != 0 && id != keep {
            *v = GLACIER;
        }
    }
    Retained {
        mask: ZoneMask {
            labels,
            resolution_m: z.resolution_m,
        },
        no_ocean: false,
    }
}

/// Glacier pixels with at least one ocean neighbour.
pub fn extract_front(z: &ZoneMask) -> FrontSet {
    let (h, w) = z.labels.dims();
    let mut pixels = BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            if z.labels.get(r, c) == GLACIER && neighbours(r, c, h, w, CONNECTIVITY).any(|(nr, nc)| z.labels.get(nr, nc) == OCEAN) {
                pixels.insert((r, c));
            }
        }
    }
    FrontSet {
        pixels,
        resolution_m: z.resolution_m,
    }
}

/// `retain_ocean` followed by `extract_front`.
pub fn delineate(z: &ZoneMask) -> FrontSet {
    extract_front(&retain_ocean(z).mask)
}
