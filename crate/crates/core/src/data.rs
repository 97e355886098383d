//! On-disk dataset layout.
//!
//! `manifest.json` holds one record per bag; each bag is a binary file:
//! 4-byte magic "TPFM", five little-endian u32 (version, K, tile_size,
//! tile_size, C), then K*tile_size^2*C little-endian f32 values in bag-major,
//! row-major order. Tile grid coordinates and signal-tile ground truth are
//! auxiliary sidecars (`<bag>.coords.json`, `truth.json`), not part of the
//! bag format.

use crate::error::{Error, Result};
use crate::synth::TileBag;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

pub const BAG_MAGIC: &[u8; 4] = b"TPFM";
pub const BAG_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Copy, Clone, PartialEq, Eq, Debug, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct BagRecord {
    pub bag_id: String,
    pub split: Split,
    pub labels: Vec<u8>,
    pub magnification: u8,
    pub path: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub tile_size: usize,
    #[serde(rename = "C")]
    pub channels: usize,
}

/// Per-bag ground truth: grid coordinates of planted-signal tiles per class.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct TruthRecord {
    pub bag_id: String,
    pub signal_coords: Vec<Vec<(u32, u32)>>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
struct CoordsSidecar {
    coords: Vec<(u32, u32)>,
}

pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<BagRecord>,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = root.join("manifest.json");
        let file = File::open(&manifest)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", manifest.display())))?;
        let records: Vec<BagRecord> = serde_json::from_reader(BufReader::new(file))?;
        if records.is_empty() {
            return Err(Error::Data("manifest is empty".into()));
        }
        Ok(Dataset { root, records })
    }

    pub fn split(&self, split: Split) -> Vec<&BagRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.records.first().map(|r| r.labels.len()).unwrap_or(0)
    }

    pub fn tile_size(&self) -> usize {
        self.records.first().map(|r| r.tile_size).unwrap_or(0)
    }

    pub fn channels(&self) -> usize {
        self.records.first().map(|r| r.channels).unwrap_or(0)
    }

    pub fn bag_path(&self, rec: &BagRecord) -> PathBuf {
        self.root.join(&rec.path)
    }

    pub fn load_bag(&self, rec: &BagRecord) -> Result<TileBag> {
        let path = self.bag_path(rec);
        let tiles = read_bag_tiles(&path)?;
        let coords = read_coords(&path)?;
        Ok(TileBag {
            bag_id: rec.bag_id.clone(),
            tiles,
            labels: rec.labels.clone(),
            coords,
        })
    }

    /// Read only the tiles at `indices` (ascending not required).
    pub fn load_bag_subset(&self, rec: &BagRecord, indices: &[usize]) -> Result<Tensor<f32>> {
        read_bag_tiles_subset(&self.bag_path(rec), indices)
    }

    pub fn truth(&self) -> Result<Vec<TruthRecord>> {
        let file = File::open(self.root.join("truth.json"))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

pub fn write_manifest(root: &Path, records: &[BagRecord]) -> Result<()> {
    let file = File::create(root.join("manifest.json"))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, records)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_truth(root: &Path, records: &[TruthRecord]) -> Result<()> {
    let file = File::create(root.join("truth.json"))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, records)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_bag(path: &Path, bag: &TileBag) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let s = bag.tiles.shape();
    let (k, ts, c) = (s[0], s[1], s[3]);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BAG_MAGIC)?;
    for v in [BAG_VERSION, k as u32, ts as u32, ts as u32, c as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(bag.tiles.numel() * 4);
    for v in bag.tiles.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    if let Some(coords) = &bag.coords {
        let sidecar = coords_path(path);
        let f = File::create(sidecar)?;
        let mut cw = BufWriter::new(f);
        serde_json::to_writer(
            &mut cw,
            &CoordsSidecar {
                coords: coords.clone(),
            },
        )?;
        cw.flush()?;
    }
    Ok(())
}

fn coords_path(bag_path: &Path) -> PathBuf {
    let mut os = bag_path.as_os_str().to_owned();
    os.push(".coords.json");
    PathBuf::from(os)
}

struct BagHeader {
    k: usize,
    tile_size: usize,
    channels: usize,
}

fn read_bag_header(r: &mut impl Read, path: &Path) -> Result<BagHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BAG_MAGIC {
        return Err(Error::Data(format!("{}: bad magic", path.display())));
    }
    let mut u32s = [0u32; 5];
    for v in u32s.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    if u32s[0] != BAG_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported version {}",
            path.display(),
            u32s[0]
        )));
    }
    if u32s[1] == 0 || u32s[2] != u32s[3] {
        return Err(Error::Data(format!("{}: malformed header", path.display())));
    }
    Ok(BagHeader {
        k: u32s[1] as usize,
        tile_size: u32s[2] as usize,
        channels: u32s[4] as usize,
    })
}

pub fn read_bag_tiles(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_bag_header(&mut r, path)?;
    let numel = h.k * h.tile_size * h.tile_size * h.channels;
    let mut buf = vec![0u8; numel * 4];
    r.read_exact(&mut buf)?;
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(vec![h.k, h.tile_size, h.tile_size, h.channels], data)
}

pub fn read_bag_tiles_subset(path: &Path, indices: &[usize]) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_bag_header(&mut r, path)?;
    let stride = h.tile_size * h.tile_size * h.channels;
    let header_bytes = 4 + 5 * 4;
    let mut data = vec![0f32; indices.len() * stride];
    let mut buf = vec![0u8; stride * 4];
    for (row, &i) in indices.iter().enumerate() {
        if i >= h.k {
            return Err(Error::Data(format!(
                "{}: tile index {i} out of range (K={})",
                path.display(),
                h.k
            )));
        }
        r.seek(SeekFrom::Start((header_bytes + i * stride * 4) as u64))?;
        r.read_exact(&mut buf)?;
        for (dst, b) in data[row * stride..(row + 1) * stride]
            .iter_mut()
            .zip(buf.chunks_exact(4))
        {
            *dst = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    Tensor::new(
        vec![indices.len(), h.tile_size, h.tile_size, h.channels],
        data,
    )
}

pub fn read_coords(bag_path: &Path) -> Result<Option<Vec<(u32, u32)>>> {
    let sidecar = coords_path(bag_path);
    if !sidecar.exists() {
        return Ok(None);
    }
    let file = File::open(sidecar)?;
    let sc: CoordsSidecar = serde_json::from_reader(BufReader::new(file))?;
    Ok(Some(sc.coords))
}
