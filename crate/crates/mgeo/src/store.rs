//! Embedding databases and their on-disk format.
//!
//! A database holds one descriptor per (landmark, view) pair. Drone views sit
//! on a fixed grid of 3 height levels x 18 azimuths (20 degree steps), giving
//! 54 slots per landmark; satellite databases hold one descriptor per landmark
//! with no pose. Aggregated drone databases (one fused descriptor per
//! landmark) also carry no pose.
//!
//! File layout (`MGEO`, little-endian throughout):
//!
//! ```text
//! magic    4 bytes  "MGEO"
//! version  u32      currently 1
//! role     u8       0 = drone, 1 = satellite
//! dim      u32      feature dimension D
//! count    u64      number of records
//! record   (count times)
//!   landmark_id   u32
//!   height_level  u8    0..=2, or 255 for "no pose"
//!   azimuth_deg   u16   multiple of 20 below 360, or 0 when height is 255
//!   feature       D x f32
//! ```
//!
//! The header is 21 bytes; each record is 7 + 4*D bytes. Load rejects
//! non-finite features and duplicate (landmark, slot) pairs, so a database
//! that loads is safe to compute with; softer shape problems (missing slots,
//! duplicated landmarks) are reported by [`EmbeddingDatabase::validate`]
//! instead of failing the load.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MGEO";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 21;

pub const HEIGHT_LEVELS: u8 = 3;
pub const AZIMUTH_STEP_DEG: u16 = 20;
pub const AZIMUTHS_PER_LEVEL: u8 = 18;
/// Views per landmark on the full drone grid.
pub const SLOT_COUNT: u8 = HEIGHT_LEVELS * AZIMUTHS_PER_LEVEL;

/// Height byte marking a poseless record on disk and in manifests.
pub const SENTINEL_HEIGHT: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Drone,
    Satellite,
}

impl Role {
    fn to_byte(self) -> u8 {
        match self {
            Role::Drone => 0,
            Role::Satellite => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Role> {
        match b {
            0 => Some(Role::Drone),
            1 => Some(Role::Satellite),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Drone => write!(f, "drone"),
            Role::Satellite => write!(f, "satellite"),
        }
    }
}

/// Position of a drone view on the capture grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewPose {
    height_level: u8,
    azimuth_deg: u16,
}

impl ViewPose {
    pub fn new(height_level: u8, azimuth_deg: u16) -> Result<ViewPose, StoreError> {
        if height_level >= HEIGHT_LEVELS
            || azimuth_deg >= 360
            || azimuth_deg % AZIMUTH_STEP_DEG != 0
        {
            return Err(StoreError::InvalidPose {
                height_level,
                azimuth_deg,
            });
        }
        Ok(ViewPose {
            height_level,
            azimuth_deg,
        })
    }

    pub fn height_level(&self) -> u8 {
        self.height_level
    }

    pub fn azimuth_deg(&self) -> u16 {
        self.azimuth_deg
    }

    /// Slot id in 0..54: 18 * height + azimuth / 20.
    pub fn slot(&self) -> u8 {
        AZIMUTHS_PER_LEVEL * self.height_level + (self.azimuth_deg / AZIMUTH_STEP_DEG) as u8
    }

    /// Inverse of [`ViewPose::slot`].
    pub fn from_slot(slot: u8) -> Result<ViewPose, StoreError> {
        if slot >= SLOT_COUNT {
            return Err(StoreError::InvalidSlot { slot });
        }
        Ok(ViewPose {
            height_level: slot / AZIMUTHS_PER_LEVEL,
            azimuth_deg: (slot % AZIMUTHS_PER_LEVEL) as u16 * AZIMUTH_STEP_DEG,
        })
    }
}

impl fmt::Display for ViewPose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(h{}, {}deg)", self.height_level, self.azimuth_deg)
    }
}

/// One stored embedding. `pose` is `None` for satellite descriptors and for
/// aggregated drone descriptors; on disk that is the (255, 0) sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewDescriptor {
    pub landmark_id: u32,
    pub pose: Option<ViewPose>,
    pub feature: Vec<f32>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("bad magic: expected \"MGEO\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} (supported: {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("invalid role byte {found}")]
    InvalidRole { found: u8 },
    #[error("declared dimension must be positive")]
    ZeroDimension,
    #[error(
        "dimension mismatch: {expected} bytes implied by header (dim {dim}, count {count}), file has {actual}"
    )]
    DimensionMismatch {
        dim: u32,
        count: u64,
        expected: u64,
        actual: u64,
    },
    #[error(
        "record {record}: feature length {found} does not match database dimension {expected}"
    )]
    FeatureLength {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {record}: non-finite feature value at component {component}")]
    NonFinite { record: usize, component: usize },
    #[error(
        "duplicate (landmark {landmark_id}, slot {slot}) pair at records {first} and {second}"
    )]
    DuplicateSlot {
        landmark_id: u32,
        slot: u8,
        first: usize,
        second: usize,
    },
    #[error("invalid pose: height level {height_level}, azimuth {azimuth_deg}")]
    InvalidPose { height_level: u8, azimuth_deg: u16 },
    #[error("invalid slot id {slot} (valid: 0..{SLOT_COUNT})")]
    InvalidSlot { slot: u8 },
    #[error("record {record}: invalid pose bytes (height {height_level}, azimuth {azimuth_deg})")]
    InvalidPoseRecord {
        record: usize,
        height_level: u8,
        azimuth_deg: u16,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shape problem reported by [`EmbeddingDatabase::validate`]. Violations are
/// keyed by landmark and pose rather than record position, so permuting the
/// descriptors of a database yields the same violation set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Violation {
    /// Drone database lacks a grid view for this landmark.
    MissingSlot { landmark_id: u32, slot: u8 },
    /// More than one descriptor for a landmark in a poseless database.
    DuplicateLandmark { landmark_id: u32, count: usize },
    /// Satellite descriptor carries a grid pose.
    SatellitePose { landmark_id: u32, slot: u8 },
    /// Drone database mixes posed and poseless (aggregated) descriptors.
    MixedPoseKinds {
        landmark_id: u32,
        posed: usize,
        poseless: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingSlot { landmark_id, slot } => {
                let pose = ViewPose::from_slot(*slot).expect("violation stores a valid slot");
                write!(f, "landmark {landmark_id}: missing slot {slot} {pose}")
            }
            Violation::DuplicateLandmark { landmark_id, count } => {
                write!(f, "landmark {landmark_id}: {count} descriptors, expected 1")
            }
            Violation::SatellitePose { landmark_id, slot } => {
                write!(
                    f,
                    "landmark {landmark_id}: satellite descriptor has pose slot {slot}"
                )
            }
            Violation::MixedPoseKinds {
                landmark_id,
                posed,
                poseless,
            } => write!(
                f,
                "landmark {landmark_id}: mixes {posed} posed and {poseless} poseless descriptors"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDatabase {
    role: Role,
    dim: usize,
    descriptors: Vec<ViewDescriptor>,
}

impl EmbeddingDatabase {
    /// Build a database, enforcing the same invariants as a file load:
    /// positive dimension, matching feature lengths, finite values, and no
    /// duplicate (landmark, slot) pair among posed descriptors.
    pub fn new(
        role: Role,
        dim: usize,
        descriptors: Vec<ViewDescriptor>,
    ) -> Result<EmbeddingDatabase, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDimension);
        }
        let mut seen: BTreeMap<(u32, u8), usize> = BTreeMap::new();
        for (i, d) in descriptors.iter().enumerate() {
            if d.feature.len() != dim {
                return Err(StoreError::FeatureLength {
                    record: i,
                    expected: dim,
                    found: d.feature.len(),
                });
            }
            if let Some(c) = d.feature.iter().position(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite {
                    record: i,
                    component: c,
                });
            }
            if let Some(pose) = d.pose {
                if let Some(&first) = seen.get(&(d.landmark_id, pose.slot())) {
                    return Err(StoreError::DuplicateSlot {
                        landmark_id: d.landmark_id,
                        slot: pose.slot(),
                        first,
                        second: i,
                    });
                }
                seen.insert((d.landmark_id, pose.slot()), i);
            }
        }
        Ok(EmbeddingDatabase {
            role,
            dim,
            descriptors,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptors(&self) -> &[ViewDescriptor] {
        &self.descriptors
    }

    pub fn landmark_ids(&self) -> BTreeSet<u32> {
        self.descriptors.iter().map(|d| d.landmark_id).collect()
    }

    /// Descriptor indices grouped by landmark, in landmark order.
    pub fn by_landmark(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, d) in self.descriptors.iter().enumerate() {
            map.entry(d.landmark_id).or_default().push(i);
        }
        map
    }

    /// Descriptor indices of posed records grouped by slot, in slot order.
    pub fn by_slot(&self) -> BTreeMap<u8, Vec<usize>> {
        let mut map: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (i, d) in self.descriptors.iter().enumerate() {
            if let Some(pose) = d.pose {
                map.entry(pose.slot()).or_default().push(i);
            }
        }
        map
    }

    /// Report shape problems. The result is sorted and depends only on the
    /// descriptor multiset, not on storage order.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        match self.role {
            Role::Satellite => {
                for d in &self.descriptors {
                    if let Some(pose) = d.pose {
                        out.push(Violation::SatellitePose {
                            landmark_id: d.landmark_id,
                            slot: pose.slot(),
                        });
                    }
                }
                for (landmark_id, rows) in self.by_landmark() {
                    if rows.len() > 1 {
                        out.push(Violation::DuplicateLandmark {
                            landmark_id,
                            count: rows.len(),
                        });
                    }
                }
            }
            Role::Drone => {
                for (landmark_id, rows) in self.by_landmark() {
                    let posed = rows
                        .iter()
                        .filter(|&&i| self.descriptors[i].pose.is_some())
                        .count();
                    let poseless = rows.len() - posed;
                    if posed > 0 && poseless > 0 {
                        out.push(Violation::MixedPoseKinds {
                            landmark_id,
                            posed,
                            poseless,
                        });
                    } else if poseless > 1 {
                        // Aggregated form: one fused descriptor per landmark.
                        out.push(Violation::DuplicateLandmark {
                            landmark_id,
                            count: poseless,
                        });
                    } else if posed > 0 {
                        let present: BTreeSet<u8> = rows
                            .iter()
                            .filter_map(|&i| self.descriptors[i].pose.map(|p| p.slot()))
                            .collect();
                        for slot in 0..SLOT_COUNT {
                            if !present.contains(&slot) {
                                out.push(Violation::MissingSlot { landmark_id, slot });
                            }
                        }
                    }
                }
            }
        }
        out.sort();
        out
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.descriptors.len() * (7 + 4 * self.dim)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), StoreError> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(self.role.to_byte());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.descriptors.len() as u64).to_le_bytes());
        for d in &self.descriptors {
            buf.extend_from_slice(&d.landmark_id.to_le_bytes());
            match d.pose {
                Some(pose) => {
                    buf.push(pose.height_level());
                    buf.extend_from_slice(&pose.azimuth_deg().to_le_bytes());
                }
                None => {
                    buf.push(SENTINEL_HEIGHT);
                    buf.extend_from_slice(&0u16.to_le_bytes());
                }
            }
            for v in &d.feature {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<EmbeddingDatabase, StoreError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingDatabase, StoreError> {
        if bytes.len() < HEADER_LEN {
            return Err(StoreError::DimensionMismatch {
                dim: 0,
                count: 0,
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(StoreError::BadMagic { found: magic });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(StoreError::VersionMismatch { found: version });
        }
        let role = Role::from_byte(bytes[8]).ok_or(StoreError::InvalidRole { found: bytes[8] })?;
        let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
        if dim == 0 {
            return Err(StoreError::ZeroDimension);
        }
        let count = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
        let record_len = 7 + 4 * dim as u64;
        let expected = HEADER_LEN as u64 + count * record_len;
        if bytes.len() as u64 != expected {
            return Err(StoreError::DimensionMismatch {
                dim,
                count,
                expected,
                actual: bytes.len() as u64,
            });
        }
        let mut descriptors = Vec::with_capacity(count as usize);
        let mut off = HEADER_LEN;
        for record in 0..count as usize {
            let landmark_id = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            let height = bytes[off + 4];
            let azimuth = u16::from_le_bytes(bytes[off + 5..off + 7].try_into().unwrap());
            let pose = if height == SENTINEL_HEIGHT {
                if azimuth != 0 {
                    return Err(StoreError::InvalidPoseRecord {
                        record,
                        height_level: height,
                        azimuth_deg: azimuth,
                    });
                }
                None
            } else {
                Some(
                    ViewPose::new(height, azimuth).map_err(|_| StoreError::InvalidPoseRecord {
                        record,
                        height_level: height,
                        azimuth_deg: azimuth,
                    })?,
                )
            };
            off += 7;
            let mut feature = Vec::with_capacity(dim as usize);
            for _ in 0..dim {
                feature.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
                off += 4;
            }
            descriptors.push(ViewDescriptor {
                landmark_id,
                pose,
                feature,
            });
        }
        EmbeddingDatabase::new(role, dim as usize, descriptors)
    }

    /// CSV manifest: one `landmark_id,height_level,azimuth_deg` row per
    /// descriptor; poseless descriptors are written as `255,0`.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("landmark_id,height_level,azimuth_deg\n");
        for d in &self.descriptors {
            let (h, a) = match d.pose {
                Some(p) => (p.height_level(), p.azimuth_deg()),
                None => (SENTINEL_HEIGHT, 0),
            };
            out.push_str(&format!("{},{},{}\n", d.landmark_id, h, a));
        }
        out
    }
}

pub fn save_database(db: &EmbeddingDatabase, path: &Path) -> Result<(), StoreError> {
    let mut file = std::fs::File::create(path)?;
    db.write_to(&mut file)
}

pub fn load_database(path: &Path) -> Result<EmbeddingDatabase, StoreError> {
    let bytes = std::fs::read(path)?;
    EmbeddingDatabase::from_bytes(&bytes)
}

/// Check that two databases cover the same landmarks (required before any
/// cross-view experiment). Returns the symmetric difference.
pub fn landmark_mismatch(a: &EmbeddingDatabase, b: &EmbeddingDatabase) -> Vec<u32> {
    let sa = a.landmark_ids();
    let sb = b.landmark_ids();
    sa.symmetric_difference(&sb).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn posed(landmark_id: u32, slot: u8, feature: Vec<f32>) -> ViewDescriptor {
        ViewDescriptor {
            landmark_id,
            pose: Some(ViewPose::from_slot(slot).unwrap()),
            feature,
        }
    }

    fn poseless(landmark_id: u32, feature: Vec<f32>) -> ViewDescriptor {
        ViewDescriptor {
            landmark_id,
            pose: None,
            feature,
        }
    }

    #[test]
    fn empty_database_encodes_to_header_only() {
        let db = EmbeddingDatabase::new(Role::Drone, 4, vec![]).unwrap();
        let mut bytes = Vec::new();
        db.write_to(&mut bytes).unwrap();
        // 4 magic + 4 version + 1 role + 4 dim + 8 count.
        assert_eq!(bytes.len(), 21);
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(db.encoded_len(), bytes.len());
    }

    #[test]
    fn single_record_length_is_header_plus_record() {
        let db =
            EmbeddingDatabase::new(Role::Drone, 2, vec![posed(1, 0, vec![0.5, -1.5])]).unwrap();
        let mut bytes = Vec::new();
        db.write_to(&mut bytes).unwrap();
        // Record header: u32 landmark + u8 height + u16 azimuth = 7 bytes,
        // then 2 x f32 = 8 bytes of payload.
        assert_eq!(bytes.len(), HEADER_LEN + 7 + 8);
    }

    #[test]
    fn round_trip_preserves_bytes_and_values() {
        let db = EmbeddingDatabase::new(
            Role::Drone,
            3,
            vec![
                posed(7, 0, vec![1.0, 2.0, 3.0]),
                posed(7, 53, vec![-0.25, 0.0, 1e-20]),
                posed(9, 17, vec![f32::MIN_POSITIVE, f32::MAX, -0.0]),
            ],
        )
        .unwrap();
        let mut bytes = Vec::new();
        db.write_to(&mut bytes).unwrap();
        let back = EmbeddingDatabase::from_bytes(&bytes).unwrap();
        assert_eq!(back, db);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn poseless_round_trip_uses_sentinel() {
        let db = EmbeddingDatabase::new(
            Role::Satellite,
            2,
            vec![poseless(3, vec![1.0, 0.0]), poseless(4, vec![0.0, 1.0])],
        )
        .unwrap();
        let mut bytes = Vec::new();
        db.write_to(&mut bytes).unwrap();
        // Height byte of the first record sits right after the 21-byte header
        // and the 4-byte landmark id.
        assert_eq!(bytes[HEADER_LEN + 4], 255);
        let back = EmbeddingDatabase::from_bytes(&bytes).unwrap();
        assert_eq!(back, db);
        assert!(back.descriptors()[0].pose.is_none());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let db = EmbeddingDatabase::new(Role::Drone, 1, vec![]).unwrap();
        let mut bytes = Vec::new();
        db.write_to(&mut bytes).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            EmbeddingDatabase::from_bytes(&bytes),
            Err(StoreError::BadMagic { .. })
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let db = EmbeddingDatabase::new(Role::Drone, 1, vec![]).unwrap();
        let mut bytes = Vec::new();
        db.write_to(&mut bytes).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            EmbeddingDatabase::from_bytes(&bytes),
            Err(StoreError::VersionMismatch { found: 2 })
        ));
    }

    #[test]
    fn truncated_file_is_a_dimension_mismatch() {
        let db =
            EmbeddingDatabase::new(Role::Drone, 2, vec![posed(1, 0, vec![0.5, -1.5])]).unwrap();
        let mut bytes = Vec::new();
        db.write_to(&mut bytes).unwrap();
        bytes.pop();
        assert!(matches!(
            EmbeddingDatabase::from_bytes(&bytes),
            Err(StoreError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_feature_is_rejected_with_record_index() {
        let err = EmbeddingDatabase::new(
            Role::Drone,
            2,
            vec![
                posed(1, 0, vec![0.0, 1.0]),
                posed(1, 1, vec![f32::NAN, 1.0]),
            ],
        )
        .unwrap_err();
        match err {
            StoreError::NonFinite { record, component } => {
                assert_eq!((record, component), (1, 0));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
        // The same file-level rejection: write valid bytes, corrupt one float.
        let db =
            EmbeddingDatabase::new(Role::Drone, 2, vec![posed(1, 0, vec![0.5, -1.5])]).unwrap();
        let mut bytes = Vec::new();
        db.write_to(&mut bytes).unwrap();
        let payload = HEADER_LEN + 7;
        bytes[payload..payload + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            EmbeddingDatabase::from_bytes(&bytes),
            Err(StoreError::NonFinite {
                record: 0,
                component: 0
            })
        ));
    }

    #[test]
    fn duplicate_landmark_slot_pair_is_rejected() {
        let err = EmbeddingDatabase::new(
            Role::Drone,
            1,
            vec![posed(5, 10, vec![1.0]), posed(5, 10, vec![2.0])],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            StoreError::DuplicateSlot {
                landmark_id: 5,
                slot: 10,
                first: 0,
                second: 1
            }
        ));
    }

    #[test]
    fn corrupt_pose_bytes_are_rejected() {
        let db = EmbeddingDatabase::new(Role::Drone, 1, vec![posed(1, 0, vec![1.0])]).unwrap();
        let mut bytes = Vec::new();
        db.write_to(&mut bytes).unwrap();
        bytes[HEADER_LEN + 4] = 7; // height level out of range
        assert!(matches!(
            EmbeddingDatabase::from_bytes(&bytes),
            Err(StoreError::InvalidPoseRecord { record: 0, .. })
        ));
    }

    #[test]
    fn slot_mapping_is_a_bijection_over_all_54_slots() {
        let mut seen = BTreeSet::new();
        for h in 0..3u8 {
            for step in 0..18u16 {
                let pose = ViewPose::new(h, step * 20).unwrap();
                let slot = pose.slot();
                assert!(slot < SLOT_COUNT);
                assert!(seen.insert(slot), "slot {slot} repeated");
                assert_eq!(ViewPose::from_slot(slot).unwrap(), pose);
            }
        }
        assert_eq!(seen.len(), 54);
    }

    #[test]
    fn invalid_poses_are_rejected() {
        assert!(ViewPose::new(3, 0).is_err());
        assert!(ViewPose::new(0, 360).is_err());
        assert!(ViewPose::new(0, 15).is_err());
        assert!(ViewPose::from_slot(54).is_err());
    }

    #[test]
    fn validate_reports_missing_slot() {
        let mut descriptors: Vec<ViewDescriptor> = (0..SLOT_COUNT)
            .filter(|&s| s != ViewPose::new(2, 340).unwrap().slot())
            .map(|s| posed(7, s, vec![s as f32]))
            .collect();
        for s in 0..SLOT_COUNT {
            descriptors.push(posed(8, s, vec![s as f32 + 100.0]));
        }
        let db = EmbeddingDatabase::new(Role::Drone, 1, descriptors).unwrap();
        let violations = db.validate();
        assert_eq!(
            violations,
            vec![Violation::MissingSlot {
                landmark_id: 7,
                slot: ViewPose::new(2, 340).unwrap().slot(),
            }]
        );
    }

    #[test]
    fn validate_reports_duplicate_satellite_landmark() {
        let db = EmbeddingDatabase::new(
            Role::Satellite,
            1,
            vec![
                poseless(3, vec![1.0]),
                poseless(3, vec![2.0]),
                poseless(4, vec![3.0]),
            ],
        )
        .unwrap();
        assert_eq!(
            db.validate(),
            vec![Violation::DuplicateLandmark {
                landmark_id: 3,
                count: 2
            }]
        );
    }

    #[test]
    fn validate_is_order_insensitive() {
        let make = |rev: bool| {
            let mut descriptors = vec![
                posed(1, 0, vec![1.0]),
                posed(1, 1, vec![2.0]),
                poseless(2, vec![3.0]),
                poseless(2, vec![4.0]),
            ];
            if rev {
                descriptors.reverse();
            }
            EmbeddingDatabase::new(Role::Drone, 1, descriptors).unwrap()
        };
        assert_eq!(make(false).validate(), make(true).validate());
    }

    #[test]
    fn manifest_lists_poses_with_header() {
        let db = EmbeddingDatabase::new(
            Role::Drone,
            1,
            vec![posed(2, 19, vec![1.0]), poseless(3, vec![2.0])],
        )
        .unwrap();
        assert_eq!(
            db.manifest_csv(),
            "landmark_id,height_level,azimuth_deg\n2,1,20\n3,255,0\n"
        );
    }

    #[test]
    fn landmark_mismatch_is_symmetric_difference() {
        let a = EmbeddingDatabase::new(
            Role::Drone,
            1,
            vec![posed(1, 0, vec![1.0]), posed(2, 0, vec![2.0])],
        )
        .unwrap();
        let b = EmbeddingDatabase::new(
            Role::Satellite,
            1,
            vec![poseless(2, vec![1.0]), poseless(3, vec![2.0])],
        )
        .unwrap();
        assert_eq!(landmark_mismatch(&a, &b), vec![1, 3]);
        assert!(landmark_mismatch(&a, &a).is_empty());
    }
}
