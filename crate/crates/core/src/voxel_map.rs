//! Hashed voxel map with per-voxel plane statistics and confidence.
//!
//! Each voxel keeps running (Welford) moments of the points that fell into
//! it, a plane fitted from those moments, and a confidence `q_v` that starts
//! at the degeneracy score of the frame that created the voxel and is
//! blended toward the score of every later frame that adds to it:
//!
//! ```text
//! q_v' = β·q_v + (1 − β)·s_deg
//! ```
//!
//! The table has exactly one voxel per hash slot. A point whose key hashes to
//! a slot owned by a different key evicts that voxel ("replace on
//! collision"); there is no probing.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("plane fit needs at least {need} points, got {got}")]
    TooFewPoints { got: usize, need: usize },
    #[error("all points coincide; plane is undefined")]
    DegeneratePlane,
}

/// Integer voxel coordinates, `floor(p / side)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelKey(pub [i64; 3]);

impl VoxelKey {
    pub fn offset(&self, dx: i64, dy: i64, dz: i64) -> VoxelKey {
        let [x, y, z] = self.0;
        VoxelKey([x + dx, y + dy, z + dz])
    }

    /// Spatial hash (Teschner et al. primes).
    pub fn spatial_hash(&self) -> u64 {
        let [x, y, z] = self.0;
        (x.wrapping_mul(73_856_093) ^ y.wrapping_mul(19_349_663) ^ z.wrapping_mul(83_492_791)) as u64
    }
}

impl fmt::Display for VoxelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [x, y, z] = self.0;
        write!(f, "({x},{y},{z})")
    }
}

pub fn quantize(p: &Vector3<f64>, side: f64) -> VoxelKey {
    debug_assert!(side > 0.0);
    VoxelKey([
        (p.x / side).floor() as i64,
        (p.y / side).floor() as i64,
        (p.z / side).floor() as i64,
    ])
}

/// Map update rule applied to every point of a frame that passed the gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Created,
    Merged,
    Replaced,
    Rejected,
}

/// Optional per-voxel guard: refuse merges whose score is far below the
/// voxel's confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelAcceptance {
    pub enabled: bool,
    /// Reject when `s_deg < q_v − margin`.
    pub margin: f64,
}

impl Default for VoxelAcceptance {
    fn default() -> Self {
        VoxelAcceptance { enabled: false, margin: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelMapConfig {
    /// Voxel edge length in meters.
    pub side: f64,
    pub min_points_for_plane: usize,
    /// Confidence blending weight β.
    pub beta: f64,
    /// Number of hash slots.
    pub capacity: usize,
    /// Stored voxel budget; the least recently updated voxel is evicted when
    /// a new one would exceed it.
    pub max_voxels: usize,
    /// Plane statistics are refit on every merge while the voxel holds at most
    /// this many points; afterwards only the confidence changes.
    pub refit_limit: usize,
    /// Floor (m²) for the smallest covariance eigenvalue when computing
    /// planarity, and the threshold below which a point set is degenerate.
    pub eigen_floor: f64,
    /// Search the six face neighbours when a point's own voxel has no plane.
    pub neighbor_fallback: bool,
    pub acceptance: VoxelAcceptance,
}

impl Default for VoxelMapConfig {
    fn default() -> Self {
        VoxelMapConfig {
            side: 0.5,
            min_points_for_plane: 6,
            beta: 0.9,
            capacity: 1 << 20,
            max_voxels: 1 << 18,
            refit_limit: 50,
            eigen_floor: 1e-12,
            neighbor_fallback: false,
            acceptance: VoxelAcceptance::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneFit {
    pub centroid: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub normal: Vector3<f64>,
    /// `λ_mid / max(λ_min, eigen_floor)`.
    pub planarity: f64,
}

/// Fits a plane to a batch of points.
///
/// The normal is the eigenvector of the smallest covariance eigenvalue,
/// signed so that its largest-magnitude component is positive.
pub fn fit_plane(points: &[Vector3<f64>], config: &VoxelMapConfig) -> Result<PlaneFit, MapError> {
    let need = config.min_points_for_plane.max(2);
    if points.len() < need {
        return Err(MapError::TooFewPoints { got: points.len(), need });
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let scatter = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - centroid;
        acc + d * d.transpose()
    });
    plane_from_moments(&centroid, &(scatter / (n - 1.0)), config.eigen_floor)
}

fn plane_from_moments(
    centroid: &Vector3<f64>,
    covariance: &Matrix3<f64>,
    eigen_floor: f64,
) -> Result<PlaneFit, MapError> {
    let eig = SymmetricEigen::new(*covariance);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l_min, l_mid, l_max) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if l_max <= eigen_floor {
        return Err(MapError::DegeneratePlane);
    }
    let mut normal = eig.eigenvectors.column(order[0]).normalize();
    if normal[normal.iamax()] < 0.0 {
        normal = -normal;
    }
    Ok(PlaneFit {
        centroid: *centroid,
        covariance: *covariance,
        normal,
        planarity: l_mid.max(0.0) / l_min.max(eigen_floor),
    })
}

/// Frame-level gate: `false` means the whole frame is kept out of the map.
pub fn frame_gate(s_deg: f64, tau_global: f64) -> bool {
    !(s_deg < tau_global)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    pub key: VoxelKey,
    pub centroid: Vector3<f64>,
    /// Sample covariance of the integrated points.
    pub covariance: Matrix3<f64>,
    /// Unit plane normal; zero until the voxel has a valid plane.
    pub normal: Vector3<f64>,
    pub point_count: usize,
    /// Confidence q_v in (0, 1].
    pub confidence: f64,
    pub planarity: f64,
    scatter: Matrix3<f64>,
    last_update: u64,
}

impl Voxel {
    fn new(key: VoxelKey, p: &Vector3<f64>, confidence: f64, tick: u64) -> Self {
        Voxel {
            key,
            centroid: *p,
            covariance: Matrix3::zeros(),
            normal: Vector3::zeros(),
            point_count: 1,
            confidence,
            planarity: 0.0,
            scatter: Matrix3::zeros(),
            last_update: tick,
        }
    }

    /// Builds a voxel directly from plane parameters (tests, fixtures).
    pub fn from_plane(key: VoxelKey, plane: &PlaneFit, point_count: usize, confidence: f64) -> Self {
        Voxel {
            key,
            centroid: plane.centroid,
            covariance: plane.covariance,
            normal: plane.normal,
            point_count,
            confidence,
            planarity: plane.planarity,
            scatter: plane.covariance * (point_count.max(2) - 1) as f64,
            last_update: 0,
        }
    }

    pub fn has_plane(&self) -> bool {
        self.normal != Vector3::zeros()
    }

    fn accumulate(&mut self, p: &Vector3<f64>, config: &VoxelMapConfig) {
        self.point_count += 1;
        let n = self.point_count as f64;
        let delta = p - self.centroid;
        self.centroid += delta / n;
        self.scatter += delta * (p - self.centroid).transpose();
        self.covariance = self.scatter / (n - 1.0);
        if self.point_count >= config.min_points_for_plane {
            match plane_from_moments(&self.centroid, &self.covariance, config.eigen_floor) {
                Ok(fit) => {
                    self.normal = fit.normal;
                    self.planarity = fit.planarity;
                }
                Err(_) => {
                    self.normal = Vector3::zeros();
                    self.planarity = 0.0;
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Table {
    slots: HashMap<u64, Voxel>,
    /// (last_update, slot) for LRU eviction.
    recency: BTreeSet<(u64, u64)>,
    tick: u64,
}

/// Counts of each outcome over a batch of inserts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InsertStats {
    pub created: usize,
    pub merged: usize,
    pub replaced: usize,
    pub rejected: usize,
    pub evicted: usize,
}

impl InsertStats {
    fn record(&mut self, outcome: UpdateOutcome) {
        match outcome {
            UpdateOutcome::Created => self.created += 1,
            UpdateOutcome::Merged => self.merged += 1,
            UpdateOutcome::Replaced => self.replaced += 1,
            UpdateOutcome::Rejected => self.rejected += 1,
        }
    }
}

/// Voxel map with copy-on-write storage: [`VoxelMap::snapshot`] is O(1) and
/// stays frozen while the original keeps receiving inserts.
#[derive(Clone, Debug)]
pub struct VoxelMap {
    config: VoxelMapConfig,
    table: Arc<Table>,
    evicted: usize,
}

impl VoxelMap {
    pub fn new(config: VoxelMapConfig) -> Self {
        assert!(config.side > 0.0, "voxel side must be positive");
        assert!(config.capacity > 0, "capacity must be positive");
        VoxelMap { config, table: Arc::new(Table::default()), evicted: 0 }
    }

    pub fn config(&self) -> &VoxelMapConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.table.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.slots.is_empty()
    }

    /// Total LRU evictions over the map's lifetime.
    pub fn evictions(&self) -> usize {
        self.evicted
    }

    pub fn snapshot(&self) -> VoxelMap {
        self.clone()
    }

    pub fn key_of(&self, p: &Vector3<f64>) -> VoxelKey {
        quantize(p, self.config.side)
    }

    fn slot_of(&self, key: &VoxelKey) -> u64 {
        key.spatial_hash() % self.config.capacity as u64
    }

    /// Stored voxel for `key`, regardless of plane validity.
    pub fn get(&self, key: &VoxelKey) -> Option<&Voxel> {
        self.table.slots.get(&self.slot_of(key)).filter(|v| v.key == *key)
    }

    fn usable(&self, key: &VoxelKey) -> Option<&Voxel> {
        self.get(key)
            .filter(|v| v.point_count >= self.config.min_points_for_plane && v.has_plane())
    }

    /// Voxel containing `p` if it holds a plane; with `neighbor_fallback`
    /// enabled, otherwise the face neighbour whose centroid is closest to `p`.
    pub fn query(&self, p: &Vector3<f64>) -> Option<&Voxel> {
        self.query_with(p, self.config.neighbor_fallback)
    }

    pub fn query_with(&self, p: &Vector3<f64>, fallback: bool) -> Option<&Voxel> {
        let key = self.key_of(p);
        if let Some(v) = self.usable(&key) {
            return Some(v);
        }
        if !fallback {
            return None;
        }
        const FACES: [(i64, i64, i64); 6] =
            [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
        FACES
            .iter()
            .filter_map(|&(dx, dy, dz)| self.usable(&key.offset(dx, dy, dz)))
            .min_by(|a, b| {
                (a.centroid - p).norm_squared().total_cmp(&(b.centroid - p).norm_squared())
            })
    }

    /// Integrates one world-frame point scored `s_deg ∈ (0, 1]`.
    ///
    /// Scores outside that range are refused with `Rejected`.
    pub fn insert_point(&mut self, p: &Vector3<f64>, s_deg: f64) -> UpdateOutcome {
        if !(s_deg > 0.0 && s_deg <= 1.0) {
            return UpdateOutcome::Rejected;
        }
        let key = self.key_of(p);
        let slot = self.slot_of(&key);
        let config = self.config.clone();
        let table = Arc::make_mut(&mut self.table);
        table.tick += 1;
        let tick = table.tick;

        if let Some(voxel) = table.slots.get_mut(&slot) {
            if voxel.key == key {
                if config.acceptance.enabled && s_deg < voxel.confidence - config.acceptance.margin {
                    return UpdateOutcome::Rejected;
                }
                voxel.confidence = config.beta * voxel.confidence + (1.0 - config.beta) * s_deg;
                if voxel.point_count < config.refit_limit {
                    voxel.accumulate(p, &config);
                }
                table.recency.remove(&(voxel.last_update, slot));
                voxel.last_update = tick;
                table.recency.insert((tick, slot));
                return UpdateOutcome::Merged;
            }
            let old = voxel.last_update;
            *voxel = Voxel::new(key, p, s_deg, tick);
            table.recency.remove(&(old, slot));
            table.recency.insert((tick, slot));
            return UpdateOutcome::Replaced;
        }

        if table.slots.len() >= config.max_voxels {
            if let Some(&(t, victim)) = table.recency.iter().next() {
                table.recency.remove(&(t, victim));
                table.slots.remove(&victim);
                self.evicted += 1;
            }
        }
        table.slots.insert(slot, Voxel::new(key, p, s_deg, tick));
        table.recency.insert((tick, slot));
        UpdateOutcome::Created
    }

    pub fn insert_points<'a, I>(&mut self, points: I, s_deg: f64) -> InsertStats
    where
        I: IntoIterator<Item = &'a Vector3<f64>>,
    {
        let before = self.evicted;
        let mut stats = InsertStats::default();
        for p in points {
            stats.record(self.insert_point(p, s_deg));
        }
        stats.evicted = self.evicted - before;
        stats
    }

    /// Voxels in slot order.
    pub fn voxels(&self) -> Vec<&Voxel> {
        let mut entries: Vec<(&u64, &Voxel)> = self.table.slots.iter().collect();
        entries.sort_by_key(|(slot, _)| **slot);
        entries.into_iter().map(|(_, v)| v).collect()
    }

    fn voxels_by_key(&self) -> Vec<&Voxel> {
        let mut v: Vec<&Voxel> = self.table.slots.values().collect();
        v.sort_by_key(|v| v.key);
        v
    }

    /// Canonical byte encoding of the full map state.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.len() * 200);
        let c = &self.config;
        out.extend_from_slice(b"ALIOMAP1");
        for x in [c.side, c.beta, c.eigen_floor, c.acceptance.margin] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for n in [c.min_points_for_plane, c.capacity, c.max_voxels, c.refit_limit] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.table.tick.to_le_bytes());
        let mut entries: Vec<(&u64, &Voxel)> = self.table.slots.iter().collect();
        entries.sort_by_key(|(slot, _)| **slot);
        for (slot, v) in entries {
            out.extend_from_slice(&slot.to_le_bytes());
            for k in v.key.0 {
                out.extend_from_slice(&k.to_le_bytes());
            }
            out.extend_from_slice(&(v.point_count as u64).to_le_bytes());
            out.extend_from_slice(&v.last_update.to_le_bytes());
            let tail = [v.confidence, v.planarity];
            let scalars = v
                .centroid
                .iter()
                .chain(v.normal.iter())
                .chain(v.covariance.iter())
                .chain(v.scatter.iter())
                .chain(tail.iter());
            for x in scalars {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of [`VoxelMap::to_bytes`], hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Binary little-endian PLY of voxel centroids with `nx ny nz q_v`.
    pub fn write_ply<W: Write>(&self, mut w: W) -> io::Result<()> {
        let voxels = self.voxels_by_key();
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
             property float x\nproperty float y\nproperty float z\n\
             property float nx\nproperty float ny\nproperty float nz\n\
             property float q_v\nend_header\n",
            voxels.len()
        )?;
        for v in voxels {
            for x in v.centroid.iter().chain(v.normal.iter()).chain(std::iter::once(&v.confidence)) {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// CSV dump `kx,ky,kz,cx,cy,cz,nx,ny,nz,count,q_v,planarity`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "kx,ky,kz,cx,cy,cz,nx,ny,nz,count,q_v,planarity")?;
        for v in self.voxels_by_key() {
            let [kx, ky, kz] = v.key.0;
            writeln!(
                w,
                "{kx},{ky},{kz},{},{},{},{},{},{},{},{},{}",
                v.centroid.x,
                v.centroid.y,
                v.centroid.z,
                v.normal.x,
                v.normal.y,
                v.normal.z,
                v.point_count,
                v.confidence,
                v.planarity
            )?;
        }
        Ok(())
    }
}
