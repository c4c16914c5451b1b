//! Binary dataset files with a text sidecar.
//!
//! ```text
//! "VHDS" | version u32 | count u32
//! per record: id_len u32 | id | seed u64 | scale f64 | split u8 | 5 parts
//! part: kind u8 | center 3×f64 | radii 3×f64 | rotation 9×f64 | extra
//!   shell: inner center 3×f64 | inner radii 3×f64
//!   capped: normal 3×f64 | offset f64
//! ```
//! The sidecar (`<path>.txt`) holds one `id split seed` line per record.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{PhantomError, PhantomSpec, NUM_PARTS};
use crate::geometry::{AnalyticPart, CapPlane, PartKind};
use crate::rng;

pub const DATASET_MAGIC: &[u8; 4] = b"VHDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].get(c as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub split: Split,
    pub spec: PhantomSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<DatasetRecord>,
}

impl DatasetManifest {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == s)
    }

    pub fn count(&self, s: Split) -> usize {
        self.split(s).count()
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.id) {
                return Err(PhantomError::Invariant(format!("duplicate id {}", r.id)));
            }
        }
        Ok(())
    }
}

/// Train/val/test sizes for 6:2:2 by largest remainder; ties go to the
/// earlier split.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let quota = [0.6 * n as f64, 0.2 * n as f64, 0.2 * n as f64];
    let mut sizes = quota.map(|q| q.floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quota[a] - quota[a].floor(), quota[b] - quota[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Seeded shuffle of `0..n` cut 6:2:2. Entry `i` is the split of item `i`.
pub fn make_splits(n: usize, seed: u64) -> Result<Vec<Split>, PhantomError> {
    if n < 5 {
        return Err(PhantomError::Invariant(format!("need at least 5 items to split, got {n}")));
    }
    let [tr, va, _] = split_sizes(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "splits", 0));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in idx.iter().enumerate() {
        out[i] = if rank < tr {
            Split::Train
        } else if rank < tr + va {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// `count` phantoms with per-item seeds derived from `seed`, split 6:2:2.
pub fn generate_dataset(count: usize, seed: u64, scale: f64) -> Result<DatasetManifest, PhantomError> {
    let splits = make_splits(count, seed)?;
    let records = splits
        .into_iter()
        .enumerate()
        .map(|(i, split)| {
            let spec = super::generate_phantom(rng::derive_seed(seed, "dataset-phantom", i as u64), scale)?;
            Ok(DatasetRecord {
                id: format!("ph{i:04}"),
                split,
                spec,
            })
        })
        .collect::<Result<Vec<_>, PhantomError>>()?;
    Ok(DatasetManifest { records })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], PhantomError> {
        if self.pos + n > self.buf.len() {
            return Err(PhantomError::Format("truncated dataset".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, PhantomError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, PhantomError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, PhantomError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, PhantomError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec3(&mut self) -> Result<[f64; 3], PhantomError> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }
}

fn write_part(w: &mut Writer, p: &AnalyticPart) {
    let kind = match p.kind {
        PartKind::Ellipsoid => 0u8,
        PartKind::Shell { .. } => 1,
        PartKind::CappedEllipsoid { .. } => 2,
    };
    w.0.push(kind);
    w.f64s(&p.center);
    w.f64s(&p.radii);
    for row in &p.rotation {
        w.f64s(row);
    }
    match p.kind {
        PartKind::Ellipsoid => {}
        PartKind::Shell {
            inner_center,
            inner_radii,
        } => {
            w.f64s(&inner_center);
            w.f64s(&inner_radii);
        }
        PartKind::CappedEllipsoid { cap } => {
            w.f64s(&cap.normal);
            w.f64s(&[cap.offset]);
        }
    }
}

fn read_part(r: &mut Reader) -> Result<AnalyticPart, PhantomError> {
    let kind = r.u8()?;
    let center = r.vec3()?;
    let radii = r.vec3()?;
    let rotation = [r.vec3()?, r.vec3()?, r.vec3()?];
    let kind = match kind {
        0 => PartKind::Ellipsoid,
        1 => PartKind::Shell {
            inner_center: r.vec3()?,
            inner_radii: r.vec3()?,
        },
        2 => PartKind::CappedEllipsoid {
            cap: CapPlane {
                normal: r.vec3()?,
                offset: r.f64()?,
            },
        },
        k => return Err(PhantomError::Format(format!("unknown part kind {k}"))),
    };
    Ok(AnalyticPart {
        kind,
        center,
        radii,
        rotation,
    })
}

pub fn save_dataset(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), PhantomError> {
    manifest.validate()?;
    let path = path.as_ref();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(manifest.records.len() as u32);
    let mut side = String::new();
    for rec in &manifest.records {
        w.u32(rec.id.len() as u32);
        w.0.extend_from_slice(rec.id.as_bytes());
        w.0.extend_from_slice(&rec.spec.seed.to_le_bytes());
        w.f64s(&[rec.spec.scale]);
        w.0.push(rec.split.code());
        for p in &rec.spec.parts {
            write_part(&mut w, p);
        }
        side.push_str(&format!("{} {} {}\n", rec.id, rec.split.name(), rec.spec.seed));
    }
    std::fs::write(path, &w.0)?;
    std::fs::write(sidecar_path(path), side)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetManifest, PhantomError> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != DATASET_MAGIC {
        return Err(PhantomError::Format("bad dataset magic".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(PhantomError::Format(format!("unsupported dataset version {version}")));
    }
    let n = r.u32()? as usize;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let id = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| PhantomError::Format("id is not utf-8".into()))?;
        let seed = r.u64()?;
        let scale = r.f64()?;
        let split = Split::from_code(r.u8()?).ok_or_else(|| PhantomError::Format("bad split code".into()))?;
        let parts: Vec<AnalyticPart> = (0..NUM_PARTS).map(|_| read_part(&mut r)).collect::<Result<_, _>>()?;
        records.push(DatasetRecord {
            id,
            split,
            spec: PhantomSpec {
                seed,
                scale,
                parts: parts.try_into().unwrap(),
            },
        });
    }
    if r.pos != buf.len() {
        return Err(PhantomError::Format("trailing bytes after records".into()));
    }
    let m = DatasetManifest { records };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_phantom;
    use proptest::prelude::*;

    #[test]
    fn sizes() {
        assert_eq!(split_sizes(10), [6, 2, 2]);
        assert_eq!(split_sizes(5), [3, 1, 1]);
        assert!(make_splits(4, 0).is_err());
    }

    proptest! {
        #[test]
        fn splits_cover(n in 5usize..300, seed in any::<u64>()) {
            let s = make_splits(n, seed).unwrap();
            let c = |x| s.iter().filter(|&&v| v == x).count();
            let (a, b, t) = (c(Split::Train), c(Split::Val), c(Split::Test));
            prop_assert_eq!(a + b + t, n);
            prop_assert!((a as f64 - 0.6 * n as f64).abs() <= 1.0);
            prop_assert!((b as f64 - 0.2 * n as f64).abs() <= 1.0);
            prop_assert!((t as f64 - 0.2 * n as f64).abs() <= 1.0);
            prop_assert_eq!(s, make_splits(n, seed).unwrap());
        }
    }

    #[test]
    fn round_trip() {
        let splits = make_splits(10, 5).unwrap();
        let m = DatasetManifest {
            records: (0..10)
                .map(|i| DatasetRecord {
                    id: format!("ph{i:03}"),
                    split: splits[i],
                    spec: generate_phantom(100 + i as u64, 100.0).unwrap(),
                })
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.vhds");
        save_dataset(&m, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.count(Split::Train), 6);
        let side = std::fs::read_to_string(sidecar_path(&path)).unwrap();
        assert_eq!(side.lines().count(), 10);
        assert!(side.starts_with(&format!("ph000 {} 100", splits[0].name())));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(&path), Err(PhantomError::Format(_))));
        bytes[1] = b'H';
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(&path), Err(PhantomError::Format(_))));
    }
}
