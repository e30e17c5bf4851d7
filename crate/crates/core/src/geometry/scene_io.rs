//! Binary scene files and the plain-text action vocabulary sidecar.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "AFSN" | version u32 | point_count u32 | region_count u32
//! point_count × { x y z r g b nx ny nz : f64 }
//! region_count × { action_id u32 | n u32 | n × point index u32 | affordance u8 }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{CandidateRegion, GeometryError, ScenePointCloud, VoxelGrid};

pub const SCENE_MAGIC: &[u8; 4] = b"AFSN";
pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionRecord {
    pub action_id: u32,
    pub point_indices: Vec<u32>,
    pub is_affordance: bool,
}

/// On-disk content of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub cloud: ScenePointCloud,
    pub regions: Vec<RegionRecord>,
}

impl SceneRecord {
    /// Validates the record and rasterizes every region on the scene's
    /// fitted grid.
    pub fn candidates(&self) -> Result<(VoxelGrid, Vec<CandidateRegion>), GeometryError> {
        self.cloud.validate()?;
        let grid = VoxelGrid::fit(&self.cloud)?;
        let regions = self
            .regions
            .iter()
            .map(|r| {
                CandidateRegion::new(
                    &self.cloud,
                    grid,
                    r.point_indices.iter().map(|&i| i as usize).collect(),
                    r.action_id as usize,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((grid, regions))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SCENE_MAGIC);
        out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.cloud.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.regions.len() as u32).to_le_bytes());
        for (p, f) in self.cloud.points.iter().zip(&self.cloud.features) {
            for v in p.iter().chain(f.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for r in &self.regions {
            out.extend_from_slice(&r.action_id.to_le_bytes());
            out.extend_from_slice(&(r.point_indices.len() as u32).to_le_bytes());
            for i in &r.point_indices {
                out.extend_from_slice(&i.to_le_bytes());
            }
            out.push(u8::from(r.is_affordance));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GeometryError> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        take(&mut cur, &mut magic)?;
        if &magic != SCENE_MAGIC {
            return Err(GeometryError::Format("bad magic".into()));
        }
        let version = u32_le(&mut cur)?;
        if version != SCENE_VERSION {
            return Err(GeometryError::Format(format!("unsupported version {version}")));
        }
        let npts = u32_le(&mut cur)? as usize;
        let nreg = u32_le(&mut cur)? as usize;
        if npts.saturating_mul(72) > cur.len() {
            return Err(GeometryError::Format("truncated point block".into()));
        }
        let mut points = Vec::with_capacity(npts);
        let mut features = Vec::with_capacity(npts);
        for _ in 0..npts {
            let mut vals = [0.0; 9];
            for v in &mut vals {
                *v = f64_le(&mut cur)?;
            }
            points.push([vals[0], vals[1], vals[2]]);
            features.push([vals[3], vals[4], vals[5], vals[6], vals[7], vals[8]]);
        }
        let mut regions = Vec::with_capacity(nreg);
        for _ in 0..nreg {
            let action_id = u32_le(&mut cur)?;
            let n = u32_le(&mut cur)? as usize;
            if n.saturating_mul(4) > cur.len() {
                return Err(GeometryError::Format("truncated region block".into()));
            }
            let point_indices = (0..n).map(|_| u32_le(&mut cur)).collect::<Result<_, _>>()?;
            let mut flag = [0u8; 1];
            take(&mut cur, &mut flag)?;
            regions.push(RegionRecord {
                action_id,
                point_indices,
                is_affordance: flag[0] != 0,
            });
        }
        if !cur.is_empty() {
            return Err(GeometryError::Format("trailing bytes".into()));
        }
        Ok(Self {
            cloud: ScenePointCloud { points, features },
            regions,
        })
    }
}

fn take(cur: &mut &[u8], buf: &mut [u8]) -> Result<(), GeometryError> {
    cur.read_exact(buf)
        .map_err(|_| GeometryError::Format("unexpected end of data".into()))
}

fn u32_le(cur: &mut &[u8]) -> Result<u32, GeometryError> {
    let mut b = [0u8; 4];
    take(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn f64_le(cur: &mut &[u8]) -> Result<f64, GeometryError> {
    let mut b = [0u8; 8];
    take(cur, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn io_err(path: &Path, e: std::io::Error) -> GeometryError {
    GeometryError::Format(format!("{}: {e}", path.display()))
}

pub fn write_scene(path: &Path, scene: &SceneRecord) -> Result<(), GeometryError> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&scene.to_bytes()))
        .map_err(|e| io_err(path, e))
}

pub fn read_scene(path: &Path) -> Result<SceneRecord, GeometryError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    SceneRecord::from_bytes(&bytes)
}

/// One `id<TAB>action` line per vocabulary entry.
pub fn write_actions(path: &Path, actions: &[String]) -> Result<(), GeometryError> {
    let body: String = actions
        .iter()
        .enumerate()
        .map(|(i, a)| format!("{i}\t{a}\n"))
        .collect();
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

pub fn read_actions(path: &Path) -> Result<Vec<String>, GeometryError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| GeometryError::Format(format!("actions line {}: missing tab", lineno + 1)))?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| GeometryError::Format(format!("actions line {}: bad id", lineno + 1)))?;
        if id != out.len() {
            return Err(GeometryError::Format(format!(
                "actions line {}: expected id {}",
                lineno + 1,
                out.len()
            )));
        }
        out.push(name.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SceneRecord {
        SceneRecord {
            cloud: ScenePointCloud {
                points: vec![[0.0, 0.0, 0.0], [1.0, 0.5, 0.25], [0.5, 0.5, 0.5]],
                features: vec![[0.1, 0.2, 0.3, 0.0, 0.0, 1.0]; 3],
            },
            regions: vec![
                RegionRecord {
                    action_id: 3,
                    point_indices: vec![0, 2],
                    is_affordance: true,
                },
                RegionRecord {
                    action_id: 1,
                    point_indices: vec![1],
                    is_affordance: false,
                },
            ],
        }
    }

    #[test]
    fn round_trip_and_candidates() {
        let s = sample();
        let back = SceneRecord::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        let (_, regions) = back.candidates().unwrap();
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].mask.count(), 2);
        for r in &regions {
            r.validate(&back.cloud).unwrap();
        }
    }

    #[test]
    fn truncation_and_magic_detected() {
        let bytes = sample().to_bytes();
        assert!(SceneRecord::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(SceneRecord::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(SceneRecord::from_bytes(&extra).is_err());
    }

    #[test]
    fn actions_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("actions.txt");
        let names: Vec<String> = ["open", "rotate", "push"].iter().map(|s| s.to_string()).collect();
        write_actions(&path, &names).unwrap();
        assert_eq!(read_actions(&path).unwrap(), names);
        std::fs::write(&path, "0\topen\n2\tpush\n").unwrap();
        assert!(read_actions(&path).is_err());
    }
}
