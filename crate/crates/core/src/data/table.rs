use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

/// One model input column. Categorical cells hold the index of their level;
/// the value `levels.len()` marks a level outside the known list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default)]
    pub levels: Vec<String>,
}

impl Feature {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Continuous,
            levels: Vec::new(),
        }
    }

    pub fn categorical(name: impl Into<String>, levels: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            levels,
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == FeatureKind::Categorical
    }
}

/// Column layout for [`load_csv`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Feature columns in model order. Categorical levels left empty are
    /// discovered from the file (sorted).
    pub features: Vec<Feature>,
    pub label: String,
    /// Known class names in class-id order; discovered (sorted) when `None`.
    pub classes: Option<Vec<String>>,
    /// Column whose value changes at each recording boundary.
    pub record: Option<String>,
}

/// Row-major sensor table with one label per row.
///
/// `records[i]` identifies the contiguous recording row `i` belongs to;
/// equal ids always form one contiguous run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetTable {
    features: Vec<Feature>,
    classes: Vec<String>,
    values: Vec<f64>,
    labels: Vec<usize>,
    records: Vec<usize>,
}

impl DatasetTable {
    pub fn new(
        features: Vec<Feature>,
        classes: Vec<String>,
        values: Vec<f64>,
        labels: Vec<usize>,
        records: Vec<usize>,
    ) -> Result<Self> {
        let f = features.len();
        if f == 0 {
            return Err(Error::Data("table needs at least one feature".into()));
        }
        if values.len() != labels.len() * f || records.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} values / {} records for {} rows of {f} features",
                values.len(),
                records.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::Data(format!("label {bad} outside {} classes", classes.len())));
        }
        let mut seen = BTreeSet::new();
        for (i, &r) in records.iter().enumerate() {
            if (i == 0 || records[i - 1] != r) && !seen.insert(r) {
                return Err(Error::Data(format!("record {r} is not contiguous (row {i})")));
            }
        }
        Ok(Self {
            features,
            classes,
            values,
            labels,
            records,
        })
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.features.len();
        &self.values[i * f..(i + 1) * f]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn records(&self) -> &[usize] {
        &self.records
    }

    /// Maximal runs of rows sharing record and label, as `start..end`.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.records[i] != self.records[i - 1] || self.labels[i] != self.labels[i - 1] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// New table holding the given row ranges, each range becoming its own
    /// record.
    pub fn gather(&self, ranges: &[std::ops::Range<usize>]) -> Self {
        let f = self.features.len();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut records = Vec::new();
        for (rid, r) in ranges.iter().enumerate() {
            values.extend_from_slice(&self.values[r.start * f..r.end * f]);
            labels.extend_from_slice(&self.labels[r.clone()]);
            records.extend(std::iter::repeat_n(rid, r.len()));
        }
        Self {
            features: self.features.clone(),
            classes: self.classes.clone(),
            values,
            labels,
            records,
        }
    }

    /// Re-codes categorical columns and labels against reference level and
    /// class lists (matched by name). Unknown levels map to the out-of-list
    /// code; unknown classes are an error.
    pub fn align_to(&mut self, features: &[Feature], classes: &[String]) -> Result<()> {
        if features.len() != self.features.len() {
            return Err(Error::Schema(format!(
                "expected {} features, table has {}",
                features.len(),
                self.features.len()
            )));
        }
        for (mine, theirs) in self.features.iter().zip(features) {
            if mine.name != theirs.name || mine.kind != theirs.kind {
                return Err(Error::Schema(format!(
                    "feature {} ({:?}) does not match {} ({:?})",
                    mine.name, mine.kind, theirs.name, theirs.kind
                )));
            }
        }
        let class_map = remap(&self.classes, classes);
        if let Some(&l) = self.labels.iter().find(|&&l| class_map[l] == classes.len()) {
            return Err(Error::Schema(format!("class {} is unknown to the model", self.classes[l])));
        }
        let f = self.features.len();
        for (j, theirs) in features.iter().enumerate() {
            if !theirs.is_categorical() {
                continue;
            }
            let map = remap(&self.features[j].levels, &theirs.levels);
            for row in self.values.chunks_mut(f) {
                let code = row[j] as usize;
                row[j] = map.get(code).copied().unwrap_or(theirs.levels.len()) as f64;
            }
        }
        for l in &mut self.labels {
            *l = class_map[*l];
        }
        self.features = features.to_vec();
        self.classes = classes.to_vec();
        Ok(())
    }
}

impl DatasetTable {
    /// Writes the table as CSV with level and class names, a `record`
    /// column and a `label` column.
    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Data(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        header.extend(["record", "label"]);
        w.write_record(&header).map_err(csv_err)?;
        let mut cells = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            cells.clear();
            for (f, &v) in self.features.iter().zip(self.row(i)) {
                cells.push(match f.kind {
                    FeatureKind::Continuous => v.to_string(),
                    FeatureKind::Categorical => f.levels.get(v as usize).cloned().unwrap_or_default(),
                });
            }
            cells.push(self.records[i].to_string());
            cells.push(self.classes[self.labels[i]].clone());
            w.write_record(&cells).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))
    }

    /// Manifest schema matching [`DatasetTable::write_csv`].
    pub fn csv_schema(&self) -> Schema {
        Schema {
            features: self.features.clone(),
            label: "label".into(),
            classes: Some(self.classes.clone()),
            record: Some("record".into()),
        }
    }
}

/// Index of each `from` name within `to`, or `to.len()` when absent.
fn remap(from: &[String], to: &[String]) -> Vec<usize> {
    let pos: HashMap<&str, usize> = to.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    from.iter().map(|s| pos.get(s.as_str()).copied().unwrap_or(to.len())).collect()
}

/// Reads a headed CSV file into a typed table.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<DatasetTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_csv(reader: impl std::io::Read, schema: &Schema) -> Result<DatasetTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Data(format!("header: {e}")))?
        .clone();
    if header.is_empty() {
        return Err(Error::Data("empty file".into()));
    }
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column {name}")))
    };
    let feature_cols = schema
        .features
        .iter()
        .map(|f| col(&f.name))
        .collect::<Result<Vec<_>>>()?;
    let label_col = col(&schema.label)?;
    let record_col = schema.record.as_deref().map(col).transpose()?;

    let mut raw: Vec<csv::StringRecord> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("row {}: {e}", i + 2)))?;
        raw.push(rec);
    }
    if raw.is_empty() {
        return Err(Error::Data("empty table".into()));
    }

    let mut features = schema.features.clone();
    for (f, &c) in features.iter_mut().zip(&feature_cols) {
        if f.is_categorical() && f.levels.is_empty() {
            let set: BTreeSet<&str> = raw.iter().map(|r| &r[c]).collect();
            f.levels = set.into_iter().map(String::from).collect();
        }
    }
    let classes = match &schema.classes {
        Some(c) => c.clone(),
        None => {
            let set: BTreeSet<&str> = raw.iter().map(|r| &r[label_col]).collect();
            set.into_iter().map(String::from).collect()
        }
    };
    let class_pos: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let level_pos: Vec<HashMap<&str, usize>> = features
        .iter()
        .map(|f| f.levels.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect())
        .collect();

    let mut values = Vec::with_capacity(raw.len() * features.len());
    let mut labels = Vec::with_capacity(raw.len());
    let mut records = Vec::with_capacity(raw.len());
    let mut prev_record: Option<String> = None;
    let mut current = 0usize;
    for (i, rec) in raw.iter().enumerate() {
        let line = i + 2;
        for (j, (f, &c)) in features.iter().zip(&feature_cols).enumerate() {
            let cell = &rec[c];
            let v = match f.kind {
                FeatureKind::Continuous => cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Data(format!("row {line}, column {}: {cell:?} is not a finite number", f.name))
                })?,
                FeatureKind::Categorical => level_pos[j].get(cell).copied().unwrap_or(f.levels.len()) as f64,
            };
            values.push(v);
        }
        let label = &rec[label_col];
        labels.push(
            *class_pos
                .get(label)
                .ok_or_else(|| Error::Data(format!("row {line}, column {}: unknown label {label:?}", schema.label)))?,
        );
        if let Some(rc) = record_col {
            let key = &rec[rc];
            if i > 0 && prev_record.as_deref() != Some(key) {
                current += 1;
            }
            prev_record = Some(key.to_string());
        }
        records.push(current);
    }
    DatasetTable::new(features, classes, values, labels, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema {
            features: vec![
                Feature::continuous("a"),
                Feature::categorical("speed", vec![]),
            ],
            label: "y".into(),
            classes: Some(vec!["ok".into(), "fault".into()]),
            record: Some("rec".into()),
        }
    }

    #[test]
    fn one_valid_row() {
        let t = read_csv("a,speed,y,rec\n1.5,low,ok,r1\n".as_bytes(), &schema()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.row(0), &[1.5, 0.0]);
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(read_csv("".as_bytes(), &schema()), Err(Error::Data(_))));
        assert!(matches!(read_csv("a,speed,y,rec\n".as_bytes(), &schema()), Err(Error::Data(_))));
    }

    #[test]
    fn errors_carry_coordinates() {
        let err = read_csv("a,speed,y,rec\n1,low,ok,r\nx,low,ok,r\n".as_bytes(), &schema()).unwrap_err();
        assert!(err.to_string().contains("row 3, column a"), "{err}");
        let err = read_csv("a,speed,y,rec\n1,low,broken,r\n".as_bytes(), &schema()).unwrap_err();
        assert!(err.to_string().contains("unknown label"), "{err}");
        let err = read_csv("a,y,rec\n1,ok,r\n".as_bytes(), &schema()).unwrap_err();
        assert!(err.to_string().contains("missing column speed"), "{err}");
    }

    #[test]
    fn records_and_levels() {
        let csv = "a,speed,y,rec\n1,low,ok,r1\n2,high,ok,r1\n3,low,fault,r2\n4,medium,fault,r1\n";
        let t = read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(t.features()[1].levels, vec!["high", "low", "medium"]);
        assert_eq!(t.records(), &[0, 0, 1, 2]);
        assert_eq!(t.labels(), &[0, 0, 1, 1]);
        assert_eq!(t.segments(), vec![0..2, 2..3, 3..4]);
    }

    #[test]
    fn non_contiguous_records_rejected() {
        let f = vec![Feature::continuous("a")];
        let r = DatasetTable::new(f, vec!["x".into()], vec![0.0; 3], vec![0; 3], vec![0, 1, 0]);
        assert!(r.is_err());
    }

    #[test]
    fn align_recodes_levels_by_name() {
        let csv = "a,speed,y,rec\n1,low,ok,r1\n2,high,fault,r1\n";
        let mut t = read_csv(csv.as_bytes(), &schema()).unwrap();
        let reference = vec![
            Feature::continuous("a"),
            Feature::categorical("speed", vec!["low".into(), "medium".into()]),
        ];
        t.align_to(&reference, &["ok".into(), "fault".into()]).unwrap();
        assert_eq!(t.row(0)[1], 0.0);
        assert_eq!(t.row(1)[1], 2.0);
        let wrong = vec![Feature::continuous("b"), reference[1].clone()];
        assert!(matches!(t.align_to(&wrong, &["ok".into(), "fault".into()]), Err(Error::Schema(_))));
    }
}
