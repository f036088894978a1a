//! SemanticKITTI-style scans, labels and predictions.
//!
//! `.bin` files hold little-endian `f32 x, y, z, remission` records with no
//! header. `.label` files hold one little-endian `u32` per point, semantic
//! id in the low 16 bits and instance id in the high 16 bits.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Train id reserved for unlabeled points.
pub const IGNORE: u8 = 255;

/// Number of evaluated classes.
pub const NUM_CLASSES: usize = 19;

/// Class names in benchmark table order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "car",
    "bicycle",
    "motorcycle",
    "truck",
    "other-vehicle",
    "person",
    "bicyclist",
    "motorcyclist",
    "road",
    "parking",
    "sidewalk",
    "other-ground",
    "building",
    "fence",
    "vegetation",
    "trunk",
    "terrain",
    "pole",
    "traffic-sign",
];

/// Points in capture order with per-point remission.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub remission: Vec<f32>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>, remission: Vec<f32>) -> Result<Self> {
        if points.len() != remission.len() {
            return Err(Error::argument(format!(
                "{} points but {} remission values",
                points.len(),
                remission.len()
            )));
        }
        for (i, (p, r)) in points.iter().zip(&remission).enumerate() {
            if !(p.iter().all(|v| v.is_finite()) && r.is_finite()) {
                return Err(Error::Data {
                    index: i,
                    message: "non-finite coordinate or remission".into(),
                });
            }
        }
        Ok(PointCloud { points, remission })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Euclidean range of point `i`, computed in double precision.
    pub fn range(&self, i: usize) -> f64 {
        let [x, y, z] = self.points[i].map(f64::from);
        (x * x + y * y + z * z).sqrt()
    }

    pub fn point_f64(&self, i: usize) -> [f64; 3] {
        self.points[i].map(f64::from)
    }

    /// Copy of the cloud restricted to `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            remission: indices.iter().map(|&i| self.remission[i]).collect(),
        }
    }
}

pub fn read_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::format(format!(
            "point cloud byte length {} is not a multiple of 16",
            bytes.len()
        )));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut remission = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let (x, y, z, r) = (f(0), f(1), f(2), f(3));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && r.is_finite()) {
            return Err(Error::Data {
                index: i,
                message: "non-finite value in point record".into(),
            });
        }
        points.push([x, y, z]);
        remission.push(r);
    }
    Ok(PointCloud { points, remission })
}

pub fn write_point_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (p, r) in cloud.points.iter().zip(&cloud.remission) {
        for v in p.iter().chain(std::iter::once(r)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Raw per-point label words as stored on disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawLabels {
    pub raw: Vec<u32>,
}

impl RawLabels {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn semantic(&self, i: usize) -> u16 {
        (self.raw[i] & 0xFFFF) as u16
    }

    pub fn instance(&self, i: usize) -> u16 {
        (self.raw[i] >> 16) as u16
    }

    pub fn from_semantic(ids: &[u16]) -> Self {
        RawLabels {
            raw: ids.iter().map(|&s| u32::from(s)).collect(),
        }
    }
}

pub fn read_labels(bytes: &[u8]) -> Result<RawLabels> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::format(format!(
            "label byte length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(RawLabels {
        raw: bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    })
}

pub fn write_labels(labels: &RawLabels) -> Vec<u8> {
    labels.raw.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Raw semantic id to train id mapping.
///
/// The canonical raw id of a train id (used when writing predictions) is
/// the first raw id mapped to it in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    forward: HashMap<u16, u8>,
    inverse: [u16; NUM_CLASSES],
    names: [String; NUM_CLASSES],
}

const SEMANTIC_KITTI_MAP: &str = "\
# raw_id train_id name
# canonical ids first: the first raw id listed for a train id is used when
# writing predictions back out.
10 0 car
11 1 bicycle
15 2 motorcycle
18 3 truck
20 4 other-vehicle
30 5 person
31 6 bicyclist
32 7 motorcyclist
40 8 road
44 9 parking
48 10 sidewalk
49 11 other-ground
50 12 building
51 13 fence
70 14 vegetation
71 15 trunk
72 16 terrain
80 17 pole
81 18 traffic-sign
# folded classes
0 ignore unlabeled
1 ignore outlier
13 4 bus
16 4 on-rails
52 ignore other-structure
60 8 lane-marking
99 ignore other-object
252 0 moving-car
253 6 moving-bicyclist
254 5 moving-person
255 7 moving-motorcyclist
256 4 moving-on-rails
257 4 moving-bus
258 3 moving-truck
259 4 moving-other-vehicle
";

impl LabelMap {
    /// The dataset's published 19-class reduction.
    pub fn semantic_kitti() -> Self {
        Self::parse(SEMANTIC_KITTI_MAP).expect("built-in label map is valid")
    }

    /// Parses `raw_id train_id name` lines; `#` starts a comment and the
    /// train id may be `ignore` or `255`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut forward = HashMap::new();
        let mut inverse: [Option<u16>; NUM_CLASSES] = [None; NUM_CLASSES];
        let mut names: [Option<String>; NUM_CLASSES] = Default::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::format(format!("label map line {}: {msg}", lineno + 1));
            let mut parts = line.split_whitespace();
            let (Some(raw), Some(train)) = (parts.next(), parts.next()) else {
                return Err(bad("expected `raw_id train_id name`"));
            };
            let name = parts.collect::<Vec<_>>().join(" ");
            let raw: u16 = raw.parse().map_err(|_| bad("raw id is not a u16"))?;
            let train: u8 = if train.eq_ignore_ascii_case("ignore") {
                IGNORE
            } else {
                train.parse().map_err(|_| bad("train id is not an integer"))?
            };
            if train != IGNORE && usize::from(train) >= NUM_CLASSES {
                return Err(bad("train id outside 0..18"));
            }
            if forward.insert(raw, train).is_some() {
                return Err(bad("duplicate raw id"));
            }
            if train != IGNORE && inverse[usize::from(train)].is_none() {
                inverse[usize::from(train)] = Some(raw);
                names[usize::from(train)] = Some(if name.is_empty() {
                    CLASS_NAMES[usize::from(train)].to_string()
                } else {
                    name
                });
            }
        }
        let missing: Vec<usize> = (0..NUM_CLASSES).filter(|&t| inverse[t].is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::format(format!(
                "label map does not cover train ids {missing:?}"
            )));
        }
        Ok(LabelMap {
            forward,
            inverse: inverse.map(Option::unwrap),
            names: names.map(Option::unwrap),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# raw_id train_id name\n");
        for t in 0..NUM_CLASSES {
            let _ = writeln!(out, "{} {} {}", self.inverse[t], t, self.names[t]);
        }
        let mut rest: Vec<(&u16, &u8)> = self
            .forward
            .iter()
            .filter(|(raw, train)| {
                **train == IGNORE || self.inverse[usize::from(**train)] != **raw
            })
            .collect();
        rest.sort();
        for (raw, train) in rest {
            if *train == IGNORE {
                let _ = writeln!(out, "{raw} ignore");
            } else {
                let _ = writeln!(out, "{raw} {train}");
            }
        }
        out
    }

    pub fn forward(&self, raw_semantic: u16) -> u8 {
        self.forward.get(&raw_semantic).copied().unwrap_or(IGNORE)
    }

    /// Canonical raw id of a train id; `IGNORE` maps to 0.
    pub fn inverse(&self, train_id: u8) -> Result<u16> {
        if train_id == IGNORE {
            return Ok(0);
        }
        self.inverse
            .get(usize::from(train_id))
            .copied()
            .ok_or_else(|| Error::argument(format!("train id {train_id} out of range")))
    }

    pub fn name(&self, train_id: u8) -> &str {
        if train_id == IGNORE {
            "ignore"
        } else {
            &self.names[usize::from(train_id)]
        }
    }
}

pub fn remap(labels: &RawLabels, map: &LabelMap) -> Vec<u8> {
    (0..labels.len())
        .map(|i| map.forward(labels.semantic(i)))
        .collect()
}

/// Serializes train ids as `.label` words holding canonical raw ids.
pub fn write_predictions(train_ids: &[u8], map: &LabelMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(train_ids.len() * 4);
    for (i, &t) in train_ids.iter().enumerate() {
        let raw = map
            .inverse(t)
            .map_err(|e| e.context(format!("prediction {i}")))?;
        out.extend_from_slice(&u32::from(raw).to_le_bytes());
    }
    Ok(out)
}

/// Train / validation / test sequence ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSplit {
    train: BTreeSet<u32>,
    val: BTreeSet<u32>,
    test: BTreeSet<u32>,
}

impl SequenceSplit {
    pub fn new(
        train: impl IntoIterator<Item = u32>,
        val: impl IntoIterator<Item = u32>,
        test: impl IntoIterator<Item = u32>,
    ) -> Result<Self> {
        let split = SequenceSplit {
            train: train.into_iter().collect(),
            val: val.into_iter().collect(),
            test: test.into_iter().collect(),
        };
        let pairs = [
            ("train", &split.train, "val", &split.val),
            ("train", &split.train, "test", &split.test),
            ("val", &split.val, "test", &split.test),
        ];
        for (an, a, bn, b) in pairs {
            if let Some(s) = a.intersection(b).next() {
                return Err(Error::argument(format!(
                    "sequence {s} is in both {an} and {bn} splits"
                )));
            }
        }
        Ok(split)
    }

    pub fn train(&self) -> &BTreeSet<u32> {
        &self.train
    }

    pub fn val(&self) -> &BTreeSet<u32> {
        &self.val
    }

    pub fn test(&self) -> &BTreeSet<u32> {
        &self.test
    }
}

impl Default for SequenceSplit {
    fn default() -> Self {
        SequenceSplit::new([0, 1, 2, 3, 4, 5, 6, 7, 9, 10], [8], 11..=21)
            .expect("default split is disjoint")
    }
}

/// Parses `"0-7,9,10"` style sequence lists.
pub fn parse_sequence_list(text: &str) -> Result<Vec<u32>> {
    let mut out = BTreeSet::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parse = |s: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::argument(format!("bad sequence id `{s}`")))
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(Error::argument(format!("empty range `{part}`")));
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(parse(part)?);
            }
        }
    }
    Ok(out.into_iter().collect())
}

/// One scan on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanPaths {
    pub sequence: u32,
    pub frame: String,
    pub velodyne: PathBuf,
    pub label: Option<PathBuf>,
}

pub fn sequence_dir(root: &Path, sequence: u32) -> PathBuf {
    root.join("sequences").join(format!("{sequence:02}"))
}

/// Lists `<root>/sequences/<NN>/velodyne/*.bin` for the given sequences,
/// pairing each with `labels/<frame>.label` when present.
pub fn discover_scans(root: &Path, sequences: &[u32]) -> Result<Vec<ScanPaths>> {
    let mut scans = Vec::new();
    for &seq in sequences {
        let dir = sequence_dir(root, seq);
        let velo = dir.join("velodyne");
        let entries = std::fs::read_dir(&velo).map_err(|e| Error::io(&velo, e))?;
        let mut frames = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&velo, e))?.path();
            if path.extension().is_some_and(|e| e == "bin") {
                frames.push(path);
            }
        }
        frames.sort();
        for velodyne in frames {
            let frame = velodyne
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let label = dir.join("labels").join(format!("{frame}.label"));
            scans.push(ScanPaths {
                sequence: seq,
                frame,
                velodyne,
                label: label.is_file().then_some(label),
            });
        }
    }
    Ok(scans)
}

pub fn load_point_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_point_cloud(&bytes).map_err(|e| e.context(path.display().to_string()))
}

pub fn load_labels(path: &Path) -> Result<RawLabels> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_labels(&bytes).map_err(|e| e.context(path.display().to_string()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(points: &[[f32; 4]]) -> Vec<u8> {
        points
            .iter()
            .flat_map(|p| p.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    #[test]
    fn reads_two_points_in_order() {
        let bytes = encode(&[[1.0, 2.0, 3.0, 0.5], [-1.0, 0.0, 4.0, 0.0]]);
        assert_eq!(bytes.len(), 32);
        let cloud = read_point_cloud(&bytes).unwrap();
        assert_eq!(cloud.points, vec![[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]]);
        assert_eq!(cloud.remission, vec![0.5, 0.0]);
    }

    #[test]
    fn empty_and_misaligned_clouds() {
        assert_eq!(read_point_cloud(&[]).unwrap().len(), 0);
        assert!(matches!(read_point_cloud(&[0u8; 17]), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_point_reports_index() {
        let bytes = encode(&[[0.0, 0.0, 0.0, 0.0], [f32::NAN, 0.0, 0.0, 0.0]]);
        match read_point_cloud(&bytes) {
            Err(Error::Data { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_word_splits_semantic_and_instance() {
        let labels = read_labels(&0x0001_000Au32.to_le_bytes()).unwrap();
        assert_eq!(labels.semantic(0), 10);
        assert_eq!(labels.instance(0), 1);
        let zero = read_labels(&[0, 0, 0, 0]).unwrap();
        assert_eq!((zero.semantic(0), zero.instance(0)), (0, 0));
        assert!(matches!(read_labels(&[0u8; 6]), Err(Error::Format(_))));
    }

    #[test]
    fn default_map_is_contiguous_and_invertible() {
        let map = LabelMap::semantic_kitti();
        for t in 0..NUM_CLASSES as u8 {
            let raw = map.inverse(t).unwrap();
            assert_eq!(map.forward(raw), t);
            assert_eq!(map.name(t), CLASS_NAMES[usize::from(t)]);
        }
        assert_eq!(map.forward(252), 0);
        assert_eq!(map.forward(0), IGNORE);
    }

    #[test]
    fn text_form_reparses_to_same_map() {
        let map = LabelMap::semantic_kitti();
        assert_eq!(LabelMap::parse(&map.to_text()).unwrap(), map);
    }

    #[test]
    fn incomplete_map_is_rejected() {
        assert!(LabelMap::parse("10 0 car\n").is_err());
        assert!(LabelMap::parse("10 0 car\n10 1 bicycle\n").is_err());
    }

    #[test]
    fn remap_sends_unknown_ids_to_ignore() {
        let map = LabelMap::semantic_kitti();
        let c = map.inverse(5).unwrap();
        let labels = RawLabels::from_semantic(&[0, c, 1234]);
        assert_eq!(remap(&labels, &map), vec![IGNORE, 5, IGNORE]);
        assert!(remap(&RawLabels::default(), &map).is_empty());
    }

    #[test]
    fn write_predictions_encodes_canonical_ids() {
        let map = LabelMap::semantic_kitti();
        assert_eq!(write_predictions(&[IGNORE], &map).unwrap(), vec![0, 0, 0, 0]);
        let r = map.inverse(3).unwrap();
        assert_eq!(
            write_predictions(&[3], &map).unwrap(),
            u32::from(r).to_le_bytes().to_vec()
        );
        assert!(matches!(
            write_predictions(&[19], &map),
            Err(Error::Context { .. })
        ));
    }

    #[test]
    fn split_must_be_disjoint() {
        let split = SequenceSplit::default();
        assert_eq!(split.val().iter().copied().collect::<Vec<_>>(), vec![8]);
        assert_eq!(split.test().len(), 11);
        assert!(SequenceSplit::new([1, 8], [8], []).is_err());
    }

    #[test]
    fn sequence_lists_parse_ranges() {
        assert_eq!(parse_sequence_list("0-2,9, 10").unwrap(), vec![0, 1, 2, 9, 10]);
        assert!(parse_sequence_list("3-1").is_err());
        assert!(parse_sequence_list("x").is_err());
    }

    proptest! {
        #[test]
        fn point_records_reserialize_byte_identically(
            recs in proptest::collection::vec(
                proptest::array::uniform4(-1.0e4f32..1.0e4f32), 0..64)
        ) {
            let bytes = encode(&recs);
            let cloud = read_point_cloud(&bytes).unwrap();
            prop_assert_eq!(write_point_cloud(&cloud), bytes);
        }

        #[test]
        fn remap_write_read_recovers_canonical_ids(
            ids in proptest::collection::vec(0u16..300, 0..128)
        ) {
            let map = LabelMap::semantic_kitti();
            let train = remap(&RawLabels::from_semantic(&ids), &map);
            prop_assert!(train.iter().all(|&t| t == IGNORE || usize::from(t) < NUM_CLASSES));
            let back = read_labels(&write_predictions(&train, &map).unwrap()).unwrap();
            for (i, &t) in train.iter().enumerate() {
                prop_assert_eq!(back.instance(i), 0);
                if t == IGNORE {
                    prop_assert_eq!(back.semantic(i), 0);
                } else {
                    prop_assert_eq!(back.semantic(i), map.inverse(t).unwrap());
                    prop_assert_eq!(map.forward(back.semantic(i)), t);
                }
            }
        }
    }
}
