//! On-disk dataset contract: `labels.csv`, `landmarks.csv`, optional
//! `oracle.csv` and `rules.txt`, and `images/<subject>/<frame>.png`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{CenterRuleTable, Corners, LandmarkSet, Point};

/// One aligned frame.
#[derive(Debug, Clone)]
pub struct Sample {
    pub subject: String,
    pub frame: String,
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
    pub landmarks: LandmarkSet,
    pub labels: Vec<u8>,
    /// Ground-truth boxes per AU as `[left, right]`, when the dataset ships them.
    pub oracle: Option<Vec<[Corners; 2]>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub au_names: Vec<String>,
    pub rules: CenterRuleTable,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_aus(&self) -> usize {
        self.au_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for s in &self.samples {
            if !seen.contains(&s.subject) {
                seen.push(s.subject.clone());
            }
        }
        seen
    }

    pub fn has_oracle(&self) -> bool {
        self.samples.iter().all(|s| s.oracle.is_some())
    }

    pub fn label_rows(&self, indices: &[usize]) -> Vec<Vec<u8>> {
        indices.iter().map(|&i| self.samples[i].labels.clone()).collect()
    }
}

type Table = (Vec<String>, Vec<(usize, csv::StringRecord)>);

fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Load(format!("{}: {other:?}", path.display())),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Load(format!("{}: unreadable header: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 || header[0] != "subject" || header[1] != "frame" {
        return Err(Error::Load(format!(
            "{}: header must start with subject,frame",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Load(format!("{} line {line}: {e}", path.display())))?;
        if rec.len() != header.len() {
            return Err(Error::Load(format!(
                "{} line {line}: {} fields, header has {}",
                path.display(),
                rec.len(),
                header.len()
            )));
        }
        rows.push((line, rec));
    }
    Ok((header, rows))
}

fn keyed(path: &Path, rows: Vec<(usize, csv::StringRecord)>) -> Result<HashMap<(String, String), (usize, csv::StringRecord)>> {
    let mut map = HashMap::with_capacity(rows.len());
    for (line, rec) in rows {
        let key = (rec[0].to_string(), rec[1].to_string());
        if map.contains_key(&key) {
            return Err(Error::Load(format!(
                "{} line {line}: duplicate row for subject {} frame {}",
                path.display(),
                key.0,
                key.1
            )));
        }
        map.insert(key, (line, rec));
    }
    Ok(map)
}

fn floats(path: &Path, line: usize, rec: &csv::StringRecord) -> Result<Vec<f64>> {
    rec.iter()
        .skip(2)
        .map(|v| {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Load(format!("{} line {line}: bad number {v:?}", path.display())))
        })
        .collect()
}

/// Loads and validates a dataset directory. `C` comes from the labels header.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let labels_path = dir.join("labels.csv");
    let landmarks_path = dir.join("landmarks.csv");
    for p in [&labels_path, &landmarks_path] {
        if !p.is_file() {
            return Err(Error::Load(format!("missing {}", p.display())));
        }
    }
    let (header, label_rows) = read_table(&labels_path)?;
    let au_names: Vec<String> = header[2..].to_vec();
    if au_names.is_empty() {
        return Err(Error::Load(format!("{}: no AU columns", labels_path.display())));
    }
    let c = au_names.len();

    let (lm_header, lm_rows) = read_table(&landmarks_path)?;
    let lm_values = lm_header.len() - 2;
    if lm_values == 0 || lm_values % 2 != 0 {
        return Err(Error::Load(format!(
            "{}: expected x,y column pairs after subject,frame",
            landmarks_path.display()
        )));
    }
    let landmark_rows = keyed(&landmarks_path, lm_rows)?;

    let oracle_path = dir.join("oracle.csv");
    let oracle_rows = if oracle_path.is_file() {
        let (h, rows) = read_table(&oracle_path)?;
        if h.len() - 2 != 8 * c {
            return Err(Error::Load(format!(
                "{}: expected {} box columns for {c} AUs, found {}",
                oracle_path.display(),
                8 * c,
                h.len() - 2
            )));
        }
        Some(keyed(&oracle_path, rows)?)
    } else {
        None
    };

    let rules_path = dir.join("rules.txt");
    let rules = if rules_path.is_file() {
        CenterRuleTable::from_file(&rules_path)?
    } else if c == 12 {
        CenterRuleTable::bp4d_default()
    } else {
        return Err(Error::Load(format!(
            "missing {} and no default rule table exists for {c} AUs",
            rules_path.display()
        )));
    };
    if rules.num_aus() != c {
        return Err(Error::Load(format!(
            "{} describes {} AUs but labels have {c}",
            rules_path.display(),
            rules.num_aus()
        )));
    }
    rules.validate(lm_values / 2)?;

    let mut samples = Vec::with_capacity(label_rows.len());
    let mut seen = std::collections::HashSet::new();
    for (line, rec) in label_rows {
        let subject = rec[0].to_string();
        let frame = rec[1].to_string();
        let where_ = || format!("subject {subject} frame {frame}");
        if !seen.insert((subject.clone(), frame.clone())) {
            return Err(Error::Load(format!(
                "{} line {line}: duplicate row for {}",
                labels_path.display(),
                where_()
            )));
        }
        let labels = rec
            .iter()
            .skip(2)
            .map(|v| match v {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                _ => Err(Error::Load(format!(
                    "{} line {line} ({}): label {v:?} is not 0 or 1",
                    labels_path.display(),
                    where_()
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;

        let key = (subject.clone(), frame.clone());
        let (lm_line, lm_rec) = landmark_rows.get(&key).ok_or_else(|| {
            Error::Load(format!("{}: no row for {}", landmarks_path.display(), where_()))
        })?;
        let coords = floats(&landmarks_path, *lm_line, lm_rec)?;
        let landmarks = LandmarkSet::new(coords.chunks(2).map(|p| Point::new(p[0], p[1])).collect())?;

        let oracle = match &oracle_rows {
            None => None,
            Some(rows) => {
                let (o_line, o_rec) = rows.get(&key).ok_or_else(|| {
                    Error::Load(format!("{}: no row for {}", oracle_path.display(), where_()))
                })?;
                let v = floats(&oracle_path, *o_line, o_rec)?;
                let at = |i: usize| Corners::new(v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3]);
                Some((0..c).map(|j| [at(j), at(c + j)]).collect())
            }
        };

        let image_path = dir.join("images").join(&subject).join(format!("{frame}.png"));
        let img = image::open(&image_path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::Load(format!(
                    "image for {} at {}: {io}",
                    where_(),
                    image_path.display()
                )),
                other => Error::Image {
                    path: image_path.clone(),
                    source: other,
                },
            })?
            .to_rgb8();
        let (width, height) = (img.width() as usize, img.height() as usize);
        if let Some(i) = landmarks.points.iter().position(|p| {
            p.x < 0.0 || p.y < 0.0 || p.x > (width - 1) as f64 || p.y > (height - 1) as f64
        }) {
            return Err(Error::Load(format!(
                "{}: landmark {} of {} lies outside the {width}x{height} image",
                landmarks_path.display(),
                i + 1,
                where_()
            )));
        }
        samples.push(Sample {
            subject,
            frame,
            width,
            height,
            rgb: img.into_raw(),
            landmarks,
            labels,
            oracle,
        });
    }
    if samples.is_empty() {
        return Err(Error::Load(format!("{} has no rows", labels_path.display())));
    }
    let (w0, h0) = (samples[0].width, samples[0].height);
    if let Some(s) = samples.iter().find(|s| s.width != w0 || s.height != h0) {
        return Err(Error::Load(format!(
            "image for subject {} frame {} is {}x{}, expected {w0}x{h0}",
            s.subject, s.frame, s.width, s.height
        )));
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        au_names,
        rules,
        samples,
    })
}
