//! Tab-separated dataset manifest.
//!
//! ```text
//! # classes identity=20 nuisance=7 binary=2
//! # multi multilabel=9
//! id  path  identity  nuisance  binary  multilabel  split
//! s00000  images/s00000.tnsr  0  3  1  010000100  0
//! ```
//!
//! Paths are relative to the manifest's directory. Multi-label columns hold
//! one 0/1 character per class. `split` is an optional fold index.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use super::container::TensorContainer;
use super::dataset::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const SPLIT: &str = "split";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub fields: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Label columns in file order (after `id` and `path`).
    pub columns: Vec<String>,
    pub classes: BTreeMap<String, usize>,
    pub multi: BTreeMap<String, usize>,
    pub entries: Vec<ManifestEntry>,
    index: HashMap<String, usize>,
}

impl DatasetManifest {
    pub fn new(
        root: PathBuf,
        columns: Vec<String>,
        classes: BTreeMap<String, usize>,
        multi: BTreeMap<String, usize>,
        entries: Vec<ManifestEntry>,
    ) -> Result<Self> {
        for c in &columns {
            if c != SPLIT && !classes.contains_key(c) && !multi.contains_key(c) {
                return Err(Error::Format(format!("column `{c}` has no declared class count")));
            }
        }
        let mut index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate id `{}`", e.id)));
            }
            if e.fields.len() != columns.len() {
                return Err(Error::Format(format!(
                    "`{}` has {} label fields, header declares {}",
                    e.id,
                    e.fields.len(),
                    columns.len()
                )));
            }
            for (c, v) in columns.iter().zip(&e.fields) {
                check_value(c, v, &classes, &multi).map_err(|err| err.context(format!("id `{}`", e.id)))?;
            }
        }
        Ok(DatasetManifest {
            root,
            columns,
            classes,
            multi,
            entries,
            index,
        })
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut classes = BTreeMap::new();
        let mut multi = BTreeMap::new();
        let mut header: Option<Vec<String>> = None;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let at = |msg: String| Error::Format(format!("manifest line {}: {msg}", lineno + 1));
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut toks = rest.split_whitespace();
                let target = match toks.next() {
                    Some("classes") => &mut classes,
                    Some("multi") => &mut multi,
                    _ => continue,
                };
                for t in toks {
                    let (k, v) = t.split_once('=').ok_or_else(|| at(format!("bad declaration `{t}`")))?;
                    let n: usize = v.parse().map_err(|_| at(format!("bad class count `{v}`")))?;
                    target.insert(k.to_string(), n);
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            match &header {
                None => {
                    if cols.len() < 2 || cols[0] != "id" || cols[1] != "path" {
                        return Err(at("header must start with `id\tpath`".into()));
                    }
                    header = Some(cols[2..].iter().map(|s| s.to_string()).collect());
                }
                Some(h) => {
                    if cols.len() != h.len() + 2 {
                        return Err(at(format!("expected {} columns, got {}", h.len() + 2, cols.len())));
                    }
                    entries.push(ManifestEntry {
                        id: cols[0].to_string(),
                        path: PathBuf::from(cols[1]),
                        fields: cols[2..].iter().map(|s| s.to_string()).collect(),
                    });
                }
            }
        }
        let columns = header.ok_or_else(|| Error::Format("manifest has no header".into()))?;
        Self::new(root.to_path_buf(), columns, classes, multi, entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let decl = |m: &BTreeMap<String, usize>| {
            m.iter().map(|(k, v)| format!(" {k}={v}")).collect::<String>()
        };
        s.push_str(&format!("# classes{}\n", decl(&self.classes)));
        if !self.multi.is_empty() {
            s.push_str(&format!("# multi{}\n", decl(&self.multi)));
        }
        s.push_str("id\tpath");
        for c in &self.columns {
            s.push('\t');
            s.push_str(c);
        }
        s.push('\n');
        for e in &self.entries {
            s.push_str(&e.id);
            s.push('\t');
            s.push_str(&e.path.to_string_lossy());
            for f in &e.fields {
                s.push('\t');
                s.push_str(f);
            }
            s.push('\n');
        }
        s
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.index
            .get(id)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::InvalidArgument(format!("id `{id}` not in manifest")))
    }

    fn column(&self, field: &str) -> Result<usize> {
        self.columns.iter().position(|c| c == field).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "label field `{field}` not declared; available: {}",
                self.columns.join(", ")
            ))
        })
    }

    /// Raw field value for an id.
    pub fn field(&self, id: &str, field: &str) -> Result<&str> {
        let c = self.column(field)?;
        Ok(&self.entry(id)?.fields[c])
    }

    pub fn labels(&self, ids: &[&str], field: &str) -> Result<Labels> {
        let c = self.column(field)?;
        if let Some(&m) = self.multi.get(field) {
            let mut values = Vec::with_capacity(ids.len() * m);
            for id in ids {
                values.extend(self.entry(id)?.fields[c].chars().map(|ch| if ch == '1' { 1.0 } else { 0.0 }));
            }
            Labels::multi(m, values)
        } else {
            let classes = self.classes.get(field).copied().unwrap_or(usize::MAX);
            let values = ids
                .iter()
                .map(|id| Ok(self.entry(id)?.fields[c].parse::<usize>().expect("validated")))
                .collect::<Result<Vec<_>>>()?;
            Labels::class(classes, values)
        }
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf> {
        Ok(self.root.join(&self.entry(id)?.path))
    }

    /// Stack the listed samples (in list order) with their labels for `field`.
    pub fn load_batch(&self, ids: &[&str], field: &str) -> Result<(Tensor<f32>, Labels)> {
        let labels = self.labels(ids, field)?;
        Ok((self.load_images(ids)?, labels))
    }

    pub fn load_images(&self, ids: &[&str]) -> Result<Tensor<f32>> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty id list".into()));
        }
        let mut data = Vec::new();
        let mut dims: Option<Vec<usize>> = None;
        for id in ids {
            let t = TensorContainer::read(&self.image_path(id)?)
                .map_err(|e| e.context(format!("id `{id}`")))?;
            match &dims {
                None => dims = Some(t.dims.clone()),
                Some(d) if *d != t.dims => {
                    return Err(Error::Shape(format!("id `{id}` has dims {:?}, expected {d:?}", t.dims)))
                }
                _ => {}
            }
            data.extend_from_slice(&t.data);
        }
        let d = dims.expect("non-empty");
        let (c, h, w) = match d.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            [n] => (*n, 1, 1),
            _ => return Err(Error::Shape(format!("sample dims {d:?} are not an image"))),
        };
        Tensor::from_vec(Shape::new(ids.len(), c, h, w), data)
    }

    /// Every sample with labels for `field`.
    pub fn dataset(&self, field: &str) -> Result<Dataset> {
        let ids = self.ids();
        let (images, labels) = self.load_batch(&ids, field)?;
        Dataset::new(images, labels)
    }

    /// Ids whose `split` value is (or is not, with `include = false`) in `splits`.
    pub fn ids_by_split(&self, splits: &[usize], include: bool) -> Result<Vec<&str>> {
        let c = self.column(SPLIT)?;
        Ok(self
            .entries
            .iter()
            .filter(|e| splits.contains(&e.fields[c].parse::<usize>().expect("validated")) == include)
            .map(|e| e.id.as_str())
            .collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())
            .map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
    }

    /// Fails on the first referenced file that is missing or corrupt.
    pub fn check_files(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if seen.insert(&e.path) {
                TensorContainer::read(&self.root.join(&e.path)).map_err(|err| err.context(format!("id `{}`", e.id)))?;
            }
        }
        Ok(())
    }
}

fn check_value(
    column: &str,
    v: &str,
    classes: &BTreeMap<String, usize>,
    multi: &BTreeMap<String, usize>,
) -> Result<()> {
    if let Some(&m) = multi.get(column) {
        if v.len() != m || v.chars().any(|c| c != '0' && c != '1') {
            return Err(Error::Format(format!("`{column}` value `{v}` is not a {m}-character 0/1 mask")));
        }
        return Ok(());
    }
    let n: usize = v
        .parse()
        .map_err(|_| Error::Format(format!("`{column}` value `{v}` is not a class index")))?;
    if let Some(&k) = classes.get(column) {
        if n >= k {
            return Err(Error::Format(format!("`{column}` value {n} outside 0..{k}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "# classes binary=2 identity=3\n# multi tags=4\nid\tpath\tidentity\tbinary\ttags\tsplit\na\ta.tnsr\t0\t1\t0110\t0\nb\tb.tnsr\t2\t0\t1000\t1\n";

    #[test]
    fn parse_round_trip() {
        let m = DatasetManifest::parse(TEXT, Path::new(".")).unwrap();
        assert_eq!(m.to_text(), TEXT);
        assert_eq!(
            m.labels(&["b", "a"], "identity").unwrap(),
            Labels::Class { classes: 3, values: vec![2, 0] }
        );
        assert_eq!(
            m.labels(&["a"], "tags").unwrap(),
            Labels::Multi { classes: 4, values: vec![0.0, 1.0, 1.0, 0.0] }
        );
        assert_eq!(m.ids_by_split(&[0], false).unwrap(), vec!["b"]);
    }

    #[test]
    fn rejects_bad_rows() {
        let dup = TEXT.replace("\nb\t", "\na\t");
        assert!(DatasetManifest::parse(&dup, Path::new(".")).is_err());
        let range = TEXT.replace("\t2\t0\t", "\t3\t0\t");
        assert!(DatasetManifest::parse(&range, Path::new(".")).is_err());
        let m = DatasetManifest::parse(TEXT, Path::new(".")).unwrap();
        assert!(m.labels(&["a"], "age").is_err());
        assert!(m.labels(&["zz"], "identity").is_err());
    }
}
