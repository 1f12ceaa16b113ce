//! Labeled point clouds, the head/common/tail class partition, and the two
//! on-disk formats (`x,y,z,label` CSV and the `TLG1` binary layout).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type Point = [f32; 3];

/// Per-point real vectors of a uniform dimension, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 && !data.is_empty() {
            return Err(Error::domain("feature dimension 0 with non-empty data"));
        }
        if dim > 0 && !data.len().is_multiple_of(dim) {
            return Err(Error::domain(format!(
                "feature data length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite feature value"));
        }
        Ok(FeatureMatrix { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Positions, labels and optional features of one scene.
///
/// Immutable after construction; every constructor checks that lengths agree,
/// labels are below `num_classes` and coordinates are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPointCloud {
    positions: Vec<Point>,
    labels: Vec<u16>,
    num_classes: usize,
    features: Option<FeatureMatrix>,
}

impl LabeledPointCloud {
    pub fn new(positions: Vec<Point>, labels: Vec<u16>, num_classes: usize) -> Result<Self> {
        if positions.len() != labels.len() {
            return Err(Error::domain(format!(
                "{} positions but {} labels",
                positions.len(),
                labels.len()
            )));
        }
        if num_classes > u16::MAX as usize + 1 {
            return Err(Error::domain(format!("too many classes: {num_classes}")));
        }
        if let Some((i, _)) = positions
            .iter()
            .enumerate()
            .find(|(_, p)| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::domain(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        if let Some((i, l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes)
        {
            return Err(Error::domain(format!(
                "point {i} has label {l} but only {num_classes} classes are declared"
            )));
        }
        Ok(LabeledPointCloud {
            positions,
            labels,
            num_classes,
            features: None,
        })
    }

    pub fn with_features(mut self, features: FeatureMatrix) -> Result<Self> {
        if features.rows() != self.len() {
            return Err(Error::domain(format!(
                "{} feature rows for {} points",
                features.rows(),
                self.len()
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn features(&self) -> Option<&FeatureMatrix> {
        self.features.as_ref()
    }

    pub fn position_f64(&self, i: usize) -> [f64; 3] {
        let p = self.positions[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    /// Sub-cloud with the given point ids, in that order. Features are carried over.
    pub fn select(&self, ids: &[usize]) -> LabeledPointCloud {
        let features = self.features.as_ref().map(|f| FeatureMatrix {
            dim: f.dim,
            data: ids.iter().flat_map(|&i| f.row(i).iter().copied()).collect(),
        });
        LabeledPointCloud {
            positions: ids.iter().map(|&i| self.positions[i]).collect(),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            features,
        }
    }
}

/// Frequency group of a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Head,
    Common,
    Tail,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Head => "head",
            Group::Common => "common",
            Group::Tail => "tail",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "head" => Ok(Group::Head),
            "common" => Ok(Group::Common),
            "tail" => Ok(Group::Tail),
            other => Err(Error::domain(format!("unknown class group '{other}'"))),
        }
    }
}

/// Disjoint head/common/tail sets covering `0..C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPartition {
    head: BTreeSet<usize>,
    common: BTreeSet<usize>,
    tail: BTreeSet<usize>,
}

impl ClassPartition {
    pub fn new(
        num_classes: usize,
        head: impl IntoIterator<Item = usize>,
        common: impl IntoIterator<Item = usize>,
        tail: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let head: BTreeSet<usize> = head.into_iter().collect();
        let common: BTreeSet<usize> = common.into_iter().collect();
        let tail: BTreeSet<usize> = tail.into_iter().collect();
        let total = head.len() + common.len() + tail.len();
        let union: BTreeSet<usize> = head.iter().chain(&common).chain(&tail).copied().collect();
        if union.len() != total {
            return Err(Error::domain("class groups overlap"));
        }
        if union.len() != num_classes || union.iter().any(|&c| c >= num_classes) {
            return Err(Error::domain(format!(
                "class groups must cover exactly 0..{num_classes}"
            )));
        }
        Ok(ClassPartition { head, common, tail })
    }

    /// Builds a partition from one group per class id.
    pub fn from_groups(groups: &[Group]) -> Self {
        let pick = |g: Group| {
            groups
                .iter()
                .enumerate()
                .filter(move |(_, &x)| x == g)
                .map(|(c, _)| c)
                .collect::<BTreeSet<_>>()
        };
        ClassPartition {
            head: pick(Group::Head),
            common: pick(Group::Common),
            tail: pick(Group::Tail),
        }
    }

    pub fn head(&self) -> &BTreeSet<usize> {
        &self.head
    }

    pub fn common(&self) -> &BTreeSet<usize> {
        &self.common
    }

    pub fn tail(&self) -> &BTreeSet<usize> {
        &self.tail
    }

    pub fn members(&self, group: Group) -> &BTreeSet<usize> {
        match group {
            Group::Head => &self.head,
            Group::Common => &self.common,
            Group::Tail => &self.tail,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.len() + self.common.len() + self.tail.len()
    }

    pub fn group_of(&self, class: usize) -> Option<Group> {
        if self.head.contains(&class) {
            Some(Group::Head)
        } else if self.common.contains(&class) {
            Some(Group::Common)
        } else if self.tail.contains(&class) {
            Some(Group::Tail)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Csv,
    Binary,
}

impl CloudFormat {
    /// `.csv` is CSV; anything else is the binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CloudFormat::Csv,
            _ => CloudFormat::Binary,
        }
    }
}

pub const BINARY_MAGIC: &[u8; 4] = b"TLG1";
const BINARY_HEADER_LEN: usize = 12;
const BINARY_RECORD_LEN: usize = 14;

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<LabeledPointCloud> {
    match format {
        CloudFormat::Csv => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            parse_csv(BufReader::new(file)).map_err(|e| match e {
                Error::Io { source, .. } => Error::io(path, source),
                other => other,
            })
        }
        CloudFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_binary(&bytes)
        }
    }
}

pub fn write_cloud(cloud: &LabeledPointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res = match format {
        CloudFormat::Csv => write_csv(cloud, &mut out),
        CloudFormat::Binary => out.write_all(&encode_binary(cloud)),
    };
    res.and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Formats a coordinate with six significant digits, shortest representation.
pub fn format_sig6(v: f32) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let rounded: f64 = format!("{:.5e}", v as f64)
        .parse()
        .expect("formatted float parses");
    format!("{rounded}")
}

fn write_csv<W: Write>(cloud: &LabeledPointCloud, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "#C={}", cloud.num_classes())?;
    for (p, l) in cloud.positions().iter().zip(cloud.labels()) {
        writeln!(
            out,
            "{},{},{},{}",
            format_sig6(p[0]),
            format_sig6(p[1]),
            format_sig6(p[2]),
            l
        )?;
    }
    Ok(())
}

/// Parses `x,y,z,label` rows. An optional first line `#C=<n>` declares the
/// class count; without it the count is one past the largest label.
pub fn parse_csv<R: BufRead>(reader: R) -> Result<LabeledPointCloud> {
    let mut declared: Option<usize> = None;
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io("<csv>", e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if idx == 0 {
                if let Some(n) = rest.trim().strip_prefix("C=") {
                    let n = n.trim().parse::<usize>().map_err(|_| {
                        Error::parse_line(lineno, format!("bad class-count header '{line}'"))
                    })?;
                    declared = Some(n);
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse_line(
                lineno,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let mut p = [0f32; 3];
        for (k, f) in fields[..3].iter().enumerate() {
            let v: f32 = f
                .parse()
                .map_err(|_| Error::parse_line(lineno, format!("bad coordinate '{f}'")))?;
            if !v.is_finite() {
                return Err(Error::parse_line(
                    lineno,
                    format!("non-finite coordinate '{f}'"),
                ));
            }
            p[k] = v;
        }
        let label: u16 = fields[3]
            .parse()
            .map_err(|_| Error::parse_line(lineno, format!("bad label '{}'", fields[3])))?;
        if let Some(c) = declared {
            if label as usize >= c {
                return Err(Error::domain(format!(
                    "line {lineno}: label {label} outside 0..{c}"
                )));
            }
        }
        positions.push(p);
        labels.push(label);
    }
    let num_classes =
        declared.unwrap_or_else(|| labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0));
    LabeledPointCloud::new(positions, labels, num_classes)
}

pub fn encode_binary(cloud: &LabeledPointCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(BINARY_HEADER_LEN + cloud.len() * BINARY_RECORD_LEN);
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(cloud.num_classes() as u32).to_le_bytes());
    for (p, l) in cloud.positions().iter().zip(cloud.labels()) {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&l.to_le_bytes());
    }
    buf
}

pub fn decode_binary(bytes: &[u8]) -> Result<LabeledPointCloud> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(Error::parse_offset(0, "truncated header"));
    }
    if &bytes[..4] != BINARY_MAGIC {
        return Err(Error::parse_offset(0, "bad magic, expected TLG1"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let n = u32_at(4) as usize;
    let num_classes = u32_at(8) as usize;
    let expected = BINARY_HEADER_LEN + n * BINARY_RECORD_LEN;
    if bytes.len() != expected {
        return Err(Error::parse_offset(
            bytes.len().min(expected),
            format!(
                "expected {expected} bytes for {n} points, found {}",
                bytes.len()
            ),
        ));
    }
    let mut positions = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let o = BINARY_HEADER_LEN + i * BINARY_RECORD_LEN;
        let f = |k: usize| f32::from_le_bytes(bytes[o + 4 * k..o + 4 * k + 4].try_into().unwrap());
        let p = [f(0), f(1), f(2)];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse_offset(o, "non-finite coordinate"));
        }
        let label = u16::from_le_bytes(bytes[o + 12..o + 14].try_into().unwrap());
        if label as usize >= num_classes {
            return Err(Error::domain(format!(
                "record {i} (offset {o}): label {label} outside 0..{num_classes}"
            )));
        }
        positions.push(p);
        labels.push(label);
    }
    LabeledPointCloud::new(positions, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_line_csv() {
        let text = "0,0,0,0\n1,0,0,1\n0,1,0,0\n";
        let cloud = parse_csv(text.as_bytes()).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.labels(), &[0, 1, 0]);
        assert_eq!(cloud.num_classes(), 2);
        assert_eq!(cloud.positions()[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_csv_is_empty_cloud() {
        let cloud = parse_csv("".as_bytes()).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn header_declares_class_count_and_rejects_out_of_range() {
        let cloud = parse_csv("#C=5\n0,0,0,1\n".as_bytes()).unwrap();
        assert_eq!(cloud.num_classes(), 5);
        let err = parse_csv("#C=2\n0,0,0,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse_csv("0,0,0,0\n1,0,x,1\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "line 2"),
            other => panic!("unexpected {other}"),
        }
        assert!(parse_csv("1,2,3\n".as_bytes()).is_err());
    }

    #[test]
    fn binary_rejects_bad_magic_truncation_and_labels() {
        assert!(decode_binary(b"XXXX\0\0\0\0\0\0\0\0").is_err());
        let cloud = LabeledPointCloud::new(vec![[1.0, 2.0, 3.0]], vec![1], 2).unwrap();
        let mut bytes = encode_binary(&cloud);
        assert!(decode_binary(&bytes[..bytes.len() - 1]).is_err());
        // Overwrite C with 1 so the stored label 1 is out of range.
        bytes[8..12].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(decode_binary(&bytes), Err(Error::Domain(_))));
    }

    #[test]
    fn one_point_binary_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let cloud = LabeledPointCloud::new(vec![[1.5, -2.0, 0.25]], vec![3], 4).unwrap();
        write_cloud(&cloud, &path, CloudFormat::Binary).unwrap();
        assert_eq!(read_cloud(&path, CloudFormat::Binary).unwrap(), cloud);
    }

    #[test]
    fn empty_cloud_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = LabeledPointCloud::new(vec![], vec![], 3).unwrap();
        let bin = dir.path().join("e.bin");
        write_cloud(&cloud, &bin, CloudFormat::Binary).unwrap();
        assert_eq!(fs::metadata(&bin).unwrap().len(), 12);
        assert_eq!(read_cloud(&bin, CloudFormat::Binary).unwrap(), cloud);
        let csv = dir.path().join("e.csv");
        write_cloud(&cloud, &csv, CloudFormat::Csv).unwrap();
        assert_eq!(fs::read_to_string(&csv).unwrap(), "#C=3\n");
        assert_eq!(read_cloud(&csv, CloudFormat::Csv).unwrap(), cloud);
    }

    #[test]
    fn invariants_enforced() {
        assert!(LabeledPointCloud::new(vec![[0.0; 3]], vec![], 1).is_err());
        assert!(LabeledPointCloud::new(vec![[f32::NAN, 0.0, 0.0]], vec![0], 1).is_err());
        assert!(LabeledPointCloud::new(vec![[0.0; 3]], vec![1], 1).is_err());
        let c = LabeledPointCloud::new(vec![[0.0; 3]; 2], vec![0, 0], 1).unwrap();
        let f = FeatureMatrix::new(2, vec![1.0, 2.0]).unwrap();
        assert!(c.with_features(f).is_err());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(1.5), "1.5");
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1234567.0), "1234570");
        assert_eq!(format_sig6(-0.000_123_456_79), "-0.000123457");
    }

    #[test]
    fn partition_validation() {
        assert!(ClassPartition::new(3, [0], [1], [2]).is_ok());
        assert!(ClassPartition::new(3, [0, 1], [1], [2]).is_err());
        assert!(ClassPartition::new(3, [0], [], [2]).is_err());
        let p = ClassPartition::from_groups(&[Group::Tail, Group::Head]);
        assert_eq!(p.group_of(0), Some(Group::Tail));
        assert_eq!(p.group_of(1), Some(Group::Head));
        assert_eq!(p.group_of(2), None);
    }
}
