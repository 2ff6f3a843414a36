//! On-disk formats: images, cohort and prediction CSVs, manifests, labelled
//! pairs and ROC tables.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use drscreen_core::aggregation::LabeledPair;
use drscreen_core::cohort::{Cohort, CohortError, ImageRecord, PatientRecord, SyntheticParams};
use drscreen_core::inference::{BackendError, BackendManifest, ManifestEntry, ModelThresholds, PredictionRow};
use drscreen_core::metrics::RocCurve;
use drscreen_core::preprocess::{PreprocessError, RawImage, StandardImage, STANDARD_SIZE};
use drscreen_core::reference::ReferenceRow;
use drscreen_core::{Grade, ReferralCategory};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IoError {
    /// Stable machine-readable kind, used in CLI and HTTP error replies.
    pub fn code(&self) -> &'static str {
        match self {
            IoError::File { .. } | IoError::Io(_) => "io_error",
            IoError::Cohort(CohortError::Schema(_)) => "schema_error",
            IoError::Cohort(CohortError::DuplicateImage(_)) => "duplicate_image",
            IoError::Cohort(CohortError::OrphanImage { .. }) => "orphan_image",
            IoError::Cohort(_) => "value_error",
            IoError::Backend(BackendError::DuplicateKey { .. }) => "duplicate_key",
            IoError::Backend(BackendError::InvalidOutput(_)) => "invalid_output",
            IoError::Backend(_) => "parse_error",
            IoError::Decode(_) => "decode_error",
            IoError::Preprocess(PreprocessError::NoFundusDetected) => "no_fundus_detected",
            IoError::Preprocess(_) => "preprocess_error",
            IoError::Csv(_) | IoError::Json(_) => "parse_error",
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------- images

/// Decode PNG or JPEG bytes into an RGB image.
pub fn decode_image(bytes: &[u8]) -> Result<RawImage, IoError> {
    let img = image::load_from_memory(bytes).map_err(|e| IoError::Decode(e.to_string()))?;
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(RawImage::new(w as usize, h as usize, rgb.into_raw())?)
}

pub fn encode_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>, IoError> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(rgb, width as u32, height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| IoError::Decode(e.to_string()))?;
    Ok(out)
}

/// Write the standardised image as PNG with its provenance in a JSON file
/// beside it (same stem, `.json`).
pub fn save_standard_image(path: &Path, img: &StandardImage) -> Result<PathBuf, IoError> {
    let png = encode_png(STANDARD_SIZE, STANDARD_SIZE, img.data())?;
    fs::write(path, png).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    let sidecar = path.with_extension("json");
    serde_json::to_writer_pretty(create(&sidecar)?, img.provenance())?;
    Ok(sidecar)
}

// ---------------------------------------------------------------- cohort

const COHORT_COLUMNS: [&str; 10] = [
    "image_id",
    "patient_id",
    "age",
    "sex",
    "laterality",
    "projection",
    "grader1",
    "grader2",
    "grader3",
    "image_path",
];

fn check_headers(headers: &csv::StringRecord, required: &[&str]) -> Result<(), IoError> {
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|c| !headers.iter().any(|h| h.trim() == *c))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CohortError::Schema(format!("missing column(s): {}", missing.join(", "))).into())
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct CohortRow {
    image_id: String,
    patient_id: String,
    age: String,
    sex: String,
    laterality: String,
    projection: String,
    grader1: String,
    grader2: String,
    grader3: String,
    #[serde(default)]
    image_path: String,
}

fn value<T: std::str::FromStr>(line: usize, column: &str, raw: &str) -> Result<T, CohortError> {
    raw.trim()
        .parse()
        .map_err(|_| CohortError::Value(format!("line {line}: {column} {raw:?} is not valid")))
}

/// Parse a cohort CSV.
///
/// Every row is one image. A row with an empty `image_id` declares a patient
/// without images; a row with empty `age` and `sex` is an image of a patient
/// declared on another row.
pub fn read_cohort<R: Read>(reader: R, provenance: &str) -> Result<Cohort, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut required = COHORT_COLUMNS.to_vec();
    required.retain(|c| *c != "image_path");
    check_headers(rdr.headers()?, &required)?;

    let mut patients: Vec<PatientRecord> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut images = Vec::new();
    for (i, row) in rdr.deserialize::<CohortRow>().enumerate() {
        let line = i + 2;
        let row = row?;
        if row.patient_id.is_empty() {
            return Err(CohortError::Value(format!("line {line}: empty patient_id")).into());
        }
        if !(row.age.is_empty() && row.sex.is_empty()) {
            let p = PatientRecord {
                patient_id: row.patient_id.clone(),
                age: value(line, "age", &row.age)?,
                sex: value(line, "sex", &row.sex)?,
            };
            match index.get(&p.patient_id) {
                Some(&k) if patients[k] != p => {
                    return Err(CohortError::Value(format!(
                        "line {line}: patient {:?} has conflicting age/sex",
                        p.patient_id
                    ))
                    .into())
                }
                Some(_) => {}
                None => {
                    index.insert(p.patient_id.clone(), patients.len());
                    patients.push(p);
                }
            }
        }
        if row.image_id.is_empty() {
            continue;
        }
        let grades: [Grade; 3] = [
            value(line, "grader1", &row.grader1)?,
            value(line, "grader2", &row.grader2)?,
            value(line, "grader3", &row.grader3)?,
        ];
        images.push(ImageRecord::new(
            row.image_id,
            row.patient_id,
            value(line, "laterality", &row.laterality)?,
            value(line, "projection", &row.projection)?,
            grades,
            (!row.image_path.is_empty()).then_some(row.image_path),
        ));
    }
    Ok(Cohort::new(patients, images, provenance)?)
}

pub fn load_cohort(path: &Path) -> Result<Cohort, IoError> {
    read_cohort(open(path)?, &path.display().to_string())
}

/// Serialise so that [`read_cohort`] gives back an equal cohort.
pub fn write_cohort<W: Write>(writer: W, cohort: &Cohort) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COHORT_COLUMNS)?;
    for (p, images) in cohort.images_by_patient() {
        if images.is_empty() {
            w.write_record([
                "",
                &p.patient_id,
                &p.age.to_string(),
                p.sex.as_str(),
                "",
                "",
                "",
                "",
                "",
                "",
            ])?;
        }
        for img in images {
            let [g1, g2, g3] = img.grades;
            w.write_record([
                img.image_id.as_str(),
                &p.patient_id,
                &p.age.to_string(),
                p.sex.as_str(),
                img.laterality.as_str(),
                img.projection.as_str(),
                g1.as_str(),
                g2.as_str(),
                g3.as_str(),
                img.image_path.as_deref().unwrap_or(""),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_cohort(path: &Path, cohort: &Cohort) -> Result<(), IoError> {
    write_cohort(create(path)?, cohort)
}

pub fn load_params(path: &Path) -> Result<SyntheticParams, IoError> {
    Ok(serde_json::from_reader(open(path)?)?)
}

// ----------------------------------------------------------- predictions

pub fn read_prediction_rows<R: Read>(reader: R) -> Result<Vec<PredictionRow>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_headers(rdr.headers()?, &PREDICTION_COLUMNS)?;
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

const PREDICTION_COLUMNS: [&str; 4] = ["image_id", "model", "label", "score"];

pub fn write_prediction_rows<W: Write>(writer: W, rows: &[PredictionRow]) -> Result<(), IoError> {
    // Header written by hand so an empty file still has one.
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(PREDICTION_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Predictions CSV as a validated manifest.
pub fn load_predictions(path: &Path, thresholds: &ModelThresholds) -> Result<BackendManifest, IoError> {
    let rows = read_prediction_rows(open(path)?)?;
    Ok(BackendManifest::from_entries(
        rows.into_iter().map(PredictionRow::into_entry),
        thresholds,
    )?)
}

/// Manifest JSON: an array of `{"image_id", "model", "output"}`. An empty
/// file is an empty manifest.
pub fn parse_manifest(text: &str, thresholds: &ModelThresholds) -> Result<BackendManifest, IoError> {
    if text.trim().is_empty() {
        return Ok(BackendManifest::new());
    }
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(text).map_err(|e| BackendError::Parse(e.to_string()))?;
    Ok(BackendManifest::from_entries(entries, thresholds)?)
}

pub fn load_manifest(path: &Path, thresholds: &ModelThresholds) -> Result<BackendManifest, IoError> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text)?;
    parse_manifest(&text, thresholds)
}

pub fn save_manifest(path: &Path, manifest: &BackendManifest) -> Result<(), IoError> {
    let entries: Vec<ManifestEntry> = manifest.entries().collect();
    serde_json::to_writer_pretty(create(path)?, &entries)?;
    Ok(())
}

// ----------------------------------------------------------------- pairs

const PAIR_COLUMNS: [&str; 7] = ["unit_id", "truth", "prediction", "sex", "age", "projection", "laterality"];

fn category_code(c: ReferralCategory) -> &'static str {
    match c.code() {
        Some(0) => "0",
        Some(_) => "1",
        None => "",
    }
}

fn parse_category(line: usize, column: &str, raw: &str) -> Result<ReferralCategory, CohortError> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "0" | "non_referable" => Ok(ReferralCategory::NonReferable),
        "1" | "referable" => Ok(ReferralCategory::Referable),
        _ => Err(CohortError::Value(format!("line {line}: {column} {raw:?} must be 0 or 1"))),
    }
}

fn optional<T: std::str::FromStr>(line: usize, column: &str, raw: &str) -> Result<Option<T>, CohortError> {
    if raw.is_empty() {
        Ok(None)
    } else {
        value(line, column, raw).map(Some)
    }
}

pub fn write_pairs<W: Write>(writer: W, pairs: &[LabeledPair]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PAIR_COLUMNS)?;
    for p in pairs {
        w.write_record([
            p.unit_id.as_str(),
            category_code(p.truth),
            category_code(p.prediction),
            p.sex.as_str(),
            &p.age.to_string(),
            p.projection.map_or("", |x| x.as_str()),
            p.laterality.map_or("", |x| x.as_str()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs<R: Read>(reader: R) -> Result<Vec<LabeledPair>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_headers(rdr.headers()?, &PAIR_COLUMNS)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name).expect("checked");
    let [unit, truth, pred, sex, age, proj, lat] = PAIR_COLUMNS.map(col);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let get = |k: usize| rec.get(k).unwrap_or("");
        out.push(LabeledPair {
            unit_id: get(unit).to_string(),
            truth: parse_category(line, "truth", get(truth))?,
            prediction: parse_category(line, "prediction", get(pred))?,
            sex: value(line, "sex", get(sex))?,
            age: value(line, "age", get(age))?,
            projection: optional(line, "projection", get(proj))?,
            laterality: optional(line, "laterality", get(lat))?,
            score: None,
        });
    }
    Ok(out)
}

pub fn load_pairs(path: &Path) -> Result<Vec<LabeledPair>, IoError> {
    read_pairs(open(path)?)
}

// ------------------------------------------------------------- ROC, misc

/// `threshold,fpr,tpr`, highest threshold first; the origin row carries
/// `inf`.
pub fn write_roc<W: Write>(writer: W, roc: &RocCurve) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in &roc.points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_fixtures(path: &Path) -> Result<Vec<ReferenceRow>, IoError> {
    Ok(serde_json::from_reader(open(path)?)?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_file(path: &Path, write: impl FnOnce(BufWriter<File>) -> Result<(), IoError>) -> Result<(), IoError> {
    write(create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use drscreen_core::cohort::generate_synthetic;

    const SAMPLE: &str = "\
image_id,patient_id,age,sex,laterality,projection,grader1,grader2,grader3,image_path
P1-LA,P1,54,F,L,A,R2,R2,R0,img/p1la.png
P1-LB,P1,54,F,L,B,R0,R0,R0,
P1-RA,P1,,,R,A,R0,R2,R3,
P1-RB,P1,54,F,R,B,R6,R6,R6,
";

    #[test]
    fn reads_a_small_cohort() {
        let c = read_cohort(SAMPLE.as_bytes(), "sample").unwrap();
        assert_eq!(c.patients().len(), 1);
        assert_eq!(c.images().len(), 4);
        assert_eq!(c.images()[0].consensus, Grade::R2);
        assert_eq!(c.images()[0].image_path.as_deref(), Some("img/p1la.png"));
        assert!(c.images()[2].tie_break);
        assert_eq!(c.images()[2].consensus, Grade::R3);
    }

    #[test]
    fn cohort_errors() {
        let no_proj = SAMPLE.replace(",projection", "");
        let e = read_cohort(no_proj.as_bytes(), "x").unwrap_err();
        assert_eq!(e.code(), "schema_error", "{e}");
        assert!(e.to_string().contains("projection"));

        let orphan = SAMPLE.replace("P1-RA,P1,,,", "P1-RA,P9,,,");
        assert_eq!(read_cohort(orphan.as_bytes(), "x").unwrap_err().code(), "orphan_image");

        let dup = SAMPLE.replace("P1-LB", "P1-LA");
        assert_eq!(read_cohort(dup.as_bytes(), "x").unwrap_err().code(), "duplicate_image");

        let bad = SAMPLE.replace("R2,R2,R0", "R2,R9,R0");
        let e = read_cohort(bad.as_bytes(), "x").unwrap_err();
        assert_eq!(e.code(), "value_error");
        assert!(e.to_string().contains("line 2"), "{e}");

        let conflict = SAMPLE.replace("P1-RB,P1,54", "P1-RB,P1,55");
        assert_eq!(read_cohort(conflict.as_bytes(), "x").unwrap_err().code(), "value_error");
    }

    #[test]
    fn cohort_round_trip() {
        let c = generate_synthetic(&SyntheticParams::table3(), 2).unwrap();
        let mut buf = Vec::new();
        write_cohort(&mut buf, &c).unwrap();
        let back = read_cohort(buf.as_slice(), c.provenance()).unwrap();
        assert_eq!(back, c);

        let lonely = Cohort::new(
            vec![PatientRecord { patient_id: "X".into(), age: 40, sex: drscreen_core::Sex::Unknown }],
            vec![],
            "p",
        )
        .unwrap();
        let mut buf = Vec::new();
        write_cohort(&mut buf, &lonely).unwrap();
        assert_eq!(read_cohort(buf.as_slice(), "p").unwrap(), lonely);
    }

    #[test]
    fn manifest_text() {
        let t = ModelThresholds::default();
        assert!(parse_manifest("", &t).unwrap().is_empty());
        assert!(parse_manifest("  \n", &t).unwrap().is_empty());
        let three = r#"[
          {"image_id": "img_001", "model": "M1", "output": {"label": 1, "score": 0.93}},
          {"image_id": "img_001", "model": "MQ", "output": {"score": 0.8}},
          {"image_id": "img_001", "model": "MA", "output": {
              "macula": {"present": true, "score": 0.97},
              "optic_nerve": {"present": true, "score": 0.94}}}
        ]"#;
        assert_eq!(parse_manifest(three, &t).unwrap().len(), 3);
        let dup = r#"[
          {"image_id": "img_001", "model": "M1", "output": {"label": 1, "score": 0.93}},
          {"image_id": "img_001", "model": "M1", "output": {"label": 1, "score": 0.91}}
        ]"#;
        assert!(matches!(
            parse_manifest(dup, &t),
            Err(IoError::Backend(BackendError::DuplicateKey { .. }))
        ));
        assert!(matches!(parse_manifest("{", &t), Err(IoError::Backend(BackendError::Parse(_)))));
        let bad = r#"[{"image_id": "a", "model": "M1", "output": {"score": 1.2}}]"#;
        assert!(matches!(
            parse_manifest(bad, &t),
            Err(IoError::Backend(BackendError::InvalidOutput(_)))
        ));
    }

    #[test]
    fn prediction_rows() {
        let text = "image_id,model,label,score\na,MQ,,0.8\na,MA,1,0.9\na,M1,0,0.2\n";
        let rows = read_prediction_rows(text.as_bytes()).unwrap();
        assert_eq!(rows[0].label, None);
        let m = BackendManifest::from_entries(
            rows.clone().into_iter().map(PredictionRow::into_entry),
            &ModelThresholds::default(),
        )
        .unwrap();
        assert_eq!(m.len(), 3);
        let mut buf = Vec::new();
        write_prediction_rows(&mut buf, &rows).unwrap();
        assert_eq!(read_prediction_rows(buf.as_slice()).unwrap(), rows);
        let e = read_prediction_rows("image_id,model,score\n".as_bytes()).unwrap_err();
        assert_eq!(e.code(), "schema_error");
    }

    #[test]
    fn png_round_trip() {
        let mut raw = RawImage::black(80, 70).unwrap();
        raw.set_pixel(3, 4, [1, 2, 3]);
        let png = encode_png(raw.width(), raw.height(), raw.data()).unwrap();
        assert_eq!(decode_image(&png).unwrap(), raw);
        assert_eq!(decode_image(b"not an image").unwrap_err().code(), "decode_error");
    }
}
