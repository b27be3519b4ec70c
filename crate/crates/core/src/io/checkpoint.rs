//! Binary checkpoints of a trained model.
//!
//! Layout (all integers and floats little-endian):
//! magic `PGCKPT\0\0`, version u32, payload length u64, payload, FNV-1a 64
//! checksum of the payload. Tensors are stored as f64 so that a round trip
//! is bitwise exact.

use std::path::Path;

use crate::appearance::DecoderMlp;
use crate::error::{Error, Result};
use crate::grid::{FeatureDims, GridLayout, SparseGrid};
use crate::optim::train::{Cursor, Model};
use crate::sh::{ProbeSh, ShOrder};
use crate::Vec3;

pub const MAGIC: &[u8; 8] = b"PGCKPT\0\0";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub cursor: Cursor,
    /// Seed of every random choice made so far (initialisation and batches).
    pub seed: u64,
    /// Rendering sharpness in voxel units.
    pub tau_voxels: f64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Framing(format!(
                "payload ends at byte {} but {} more bytes are needed",
                self.buf.len(),
                n
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Framing("count overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, expected: usize, what: &str) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n != expected {
            return Err(Error::Framing(format!("{what}: expected {expected} values, found {n}")));
        }
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Framing("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u64(self.seed);
        w.u64(self.cursor.stage as u64);
        w.u64(self.cursor.iteration as u64);
        w.u64(self.cursor.step);
        w.f64(self.tau_voxels);
        for c in self.model.background {
            w.f64(c);
        }

        let g = &self.model.grid;
        w.u32(g.lod);
        for k in 0..3 {
            w.f64(g.layout.bbox_min[k]);
        }
        w.f64(g.layout.voxel_size);
        for t in g.layout.tiles_per_axis {
            w.u64(t as u64);
        }
        w.u64(g.dims.n_s as u64);
        w.u64(g.dims.n_a as u64);
        w.u8(g.dims.sh_order.get());
        w.f64(g.far_field_voxels);
        w.u64(g.tiles.len() as u64);
        for t in &g.tiles {
            for c in t.coord {
                w.u64(c as u64);
            }
        }
        w.f64s(&g.raw_sdf);
        w.f64s(&g.sdf);
        w.f64s(&g.planes);
        let probes: Vec<f64> = g.probes.iter().flat_map(|p| p.coeffs().iter().copied()).collect();
        w.f64s(&probes);

        let m = &self.model.mlp;
        w.u64(m.n_s as u64);
        w.u64(m.n_a as u64);
        w.u64(m.num_cameras() as u64);
        w.f64s(&m.params);
        w.f64s(&m.camera_bias);

        let payload = w.0;
        let mut out = Vec::with_capacity(HEADER + payload.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::Framing(format!("file is {} bytes, shorter than the header", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Framing("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let expected = (HEADER as u64).checked_add(len).and_then(|v| v.checked_add(8));
        if expected != Some(bytes.len() as u64) {
            return Err(Error::Framing(format!(
                "header announces {len} payload bytes but the file is {} bytes",
                bytes.len()
            )));
        }
        let payload = &bytes[HEADER..bytes.len() - 8];
        let checksum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if fnv1a(payload) != checksum {
            return Err(Error::Framing("checksum mismatch".into()));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let ck = Self::read_payload(&mut r)?;
        if r.pos != payload.len() {
            return Err(Error::Framing(format!("{} trailing payload bytes", payload.len() - r.pos)));
        }
        Ok(ck)
    }

    fn read_payload(r: &mut Reader<'_>) -> Result<Self> {
        let seed = r.u64()?;
        let cursor = Cursor {
            stage: r.usize()?,
            iteration: r.usize()?,
            step: r.u64()?,
        };
        let tau_voxels = r.f64()?;
        let background = [r.f64()?, r.f64()?, r.f64()?];

        let lod = r.u32()?;
        let bbox_min = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
        let voxel_size = r.f64()?;
        let tiles_per_axis = [r.usize()?, r.usize()?, r.usize()?];
        let n_s = r.usize()?;
        let n_a = r.usize()?;
        let sh_order = ShOrder::new(r.u8()?).map_err(|e| Error::Framing(e.to_string()))?;
        let far_field_voxels = r.f64()?;
        let num_tiles = r.usize()?;
        let total_tiles = tiles_per_axis.iter().try_fold(1usize, |a, &t| a.checked_mul(t));
        if total_tiles.map_or(true, |t| num_tiles > t) {
            return Err(Error::Framing(format!("{num_tiles} tiles exceed the grid")));
        }
        let mut coords = Vec::with_capacity(num_tiles);
        for _ in 0..num_tiles {
            coords.push([r.usize()?, r.usize()?, r.usize()?]);
        }
        let layout = GridLayout {
            bbox_min,
            voxel_size,
            tiles_per_axis,
        };
        let dims = FeatureDims { n_s, n_a, sh_order };
        let mut grid = SparseGrid::with_tiles(layout, dims, lod, &coords, 0.0)
            .map_err(|e| Error::Framing(e.to_string()))?;
        grid.far_field_voxels = far_field_voxels;
        grid.raw_sdf = r.f64s(grid.raw_sdf.len(), "raw sdf")?;
        grid.sdf = r.f64s(grid.sdf.len(), "sdf")?;
        grid.planes = r.f64s(grid.planes.len(), "planes")?;
        let stride = grid.probe_stride();
        let flat = r.f64s(grid.probes.len() * stride, "probes")?;
        for (p, chunk) in grid.probes.iter_mut().zip(flat.chunks(stride.max(1))) {
            *p = ProbeSh::from_coeffs(sh_order, n_a, chunk.to_vec())?;
        }

        let m_s = r.usize()?;
        let m_a = r.usize()?;
        let cams = r.usize()?;
        if (m_s, m_a) != (n_s, n_a) {
            return Err(Error::Framing("decoder and grid feature sizes differ".into()));
        }
        let mut mlp = DecoderMlp::zeros(m_s, m_a, (cams > 0).then_some(cams))
            .map_err(|e| Error::Framing(e.to_string()))?;
        mlp.params = r.f64s(mlp.params.len(), "decoder")?;
        mlp.camera_bias = r.f64s(mlp.camera_bias.len(), "camera bias")?;

        Ok(Checkpoint {
            model: Model {
                grid,
                mlp,
                background,
            },
            cursor,
            seed,
            tau_voxels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{init_grid, GridInit, InitMode, SphereInit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn checkpoint(cams: Option<usize>) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = GridInit {
            layout: GridLayout::cube(-1.0, 2.0, 2),
            dims: FeatureDims {
                n_s: 2,
                n_a: 3,
                sh_order: ShOrder::new(2).unwrap(),
            },
            lod: 1,
            mode: InitMode::Sphere(SphereInit {
                center: Vec3::zeros(),
                radius: 0.5,
            }),
        };
        let mut grid = init_grid(&config, None).unwrap();
        for v in grid.planes.iter_mut() {
            *v = rng.gen();
        }
        for p in grid.probes.iter_mut() {
            for c in p.coeffs_mut() {
                *c = rng.gen_range(-1.0..1.0);
            }
        }
        grid.far_field_voxels = 3.25;
        let mut mlp = DecoderMlp::new(2, 3, cams, &mut rng).unwrap();
        for b in mlp.camera_bias.iter_mut() {
            *b = rng.gen();
        }
        Checkpoint {
            model: Model {
                grid,
                mlp,
                background: [0.1, 0.2, 0.3],
            },
            cursor: Cursor {
                stage: 2,
                iteration: 7,
                step: 123,
            },
            seed: 42,
            tau_voxels: 12.5,
        }
    }

    #[test]
    fn bitwise_round_trip() {
        for cams in [None, Some(3)] {
            let ck = checkpoint(cams);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ck = checkpoint(Some(2));
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn truncation_is_a_framing_error() {
        let bytes = checkpoint(None).to_bytes();
        for cut in [0, 5, HEADER, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Framing(_))), "{cut}");
        }
        let mut flipped = bytes.clone();
        flipped[HEADER + 40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Framing(_))));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Framing(_))));
    }

    #[test]
    fn version_bump_is_rejected() {
        let mut bytes = checkpoint(None).to_bytes();
        bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found, expected: VERSION }) if found == VERSION + 1
        ));
    }
}
