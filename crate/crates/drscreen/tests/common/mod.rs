#![allow(dead_code)]

use drscreen_core::inference::{
    AnatomyOutput, BackendManifest, ClassifierReply, Detection, ManifestEntry, ModelId, ModelThresholds, RawOutput,
};
use drscreen_core::preprocess::RawImage;

/// A bright disc on black, the shape of a fundus photograph.
pub fn fundus(width: usize, height: usize) -> RawImage {
    let mut img = RawImage::black(width, height).unwrap();
    let (cx, cy) = (width as i64 / 2, height as i64 / 2);
    let r = (width.min(height) as i64) * 2 / 5;
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as i64 - cx, y as i64 - cy);
            if dx * dx + dy * dy <= r * r {
                img.set_pixel(x, y, [180, 90 + (x % 40) as u8, 40]);
            }
        }
    }
    img
}

pub fn fundus_png(width: usize, height: usize) -> Vec<u8> {
    let img = fundus(width, height);
    drscreen::io::encode_png(img.width(), img.height(), img.data()).unwrap()
}

fn cls(id: &str, model: ModelId, score: f64) -> ManifestEntry {
    ManifestEntry {
        image_id: id.to_string(),
        model,
        output: RawOutput::Classifier(ClassifierReply {
            label: Some(u8::from(score >= 0.5)),
            score,
        }),
    }
}

/// Stub outputs for one image. `m1` picks the grading branch; `grader`
/// is the M2 or M3 score on that branch.
pub fn image_entries(id: &str, mq: f64, m1: f64, grader: f64) -> Vec<ManifestEntry> {
    let next = if m1 >= 0.5 { ModelId::M3 } else { ModelId::M2 };
    vec![
        cls(id, ModelId::MQ, mq),
        ManifestEntry {
            image_id: id.to_string(),
            model: ModelId::MA,
            output: RawOutput::Anatomy(AnatomyOutput::new(Detection::new(true, 0.97), Detection::new(true, 0.94))),
        },
        cls(id, ModelId::M1, m1),
        cls(id, next, grader),
    ]
}

/// `good`: R0/R1 review; `r3`: referred as R3; `blurry`: fails quality.
pub fn demo_manifest() -> BackendManifest {
    let mut e = image_entries("good", 0.9, 0.1, 0.2);
    e.extend(image_entries("r3", 0.9, 0.93, 0.3));
    e.extend(image_entries("blurry", 0.2, 0.1, 0.2));
    BackendManifest::from_entries(e, &ModelThresholds::default()).unwrap()
}
