//! Multi-stage recognition: detect cars, optionally filter them by
//! attribute, detect the plate inside each car crop, crop it and read it.

use std::collections::BTreeMap;
use std::io::{Cursor, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use image::{DynamicImage, ImageFormat};
use plate_core::detect::{parse_detections, parse_yes_no, BoundingBox};
use plate_core::extract::extract_plate_token;
use plate_core::metrics::percent_half_up;
use plate_core::prompts::{attribute_question, DETECT_CAR, DETECT_PLATE, RECOGNIZE};
use plate_core::PlateLabel;
use serde::{Deserialize, Serialize};

use crate::backend::{mime_for_path, Backend, VisionQuery};
use crate::manifest::{manifest_dir, DatasetManifest};

/// Crop padding as a fraction of box size on each side.
pub const DEFAULT_PAD: f64 = 0.05;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl AttributeFilter {
    /// `None` unless at least one attribute is given.
    pub fn new(color: Option<String>, model: Option<String>) -> Option<Self> {
        let clean = |v: Option<String>| v.map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
        let f = Self {
            color: clean(color),
            model: clean(model),
        };
        (f.color.is_some() || f.model.is_some()).then_some(f)
    }

    fn values(&self) -> impl Iterator<Item = &str> {
        self.color.iter().chain(self.model.iter()).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    DetectCar,
    Filter,
    DetectPlate,
    Recognize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

impl StageFailure {
    fn new(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarResult {
    pub car_box: BoundingBox,
    pub passed_filter: bool,
    /// In full-image pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate_box: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate_label: Option<PlateLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_failed: Option<StageFailure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
    #[serde(skip)]
    pub plate_crop: Option<Vec<u8>>,
}

impl CarResult {
    fn new(car_box: BoundingBox) -> Self {
        Self {
            car_box,
            passed_filter: false,
            plate_box: None,
            plate_label: None,
            stage_failed: None,
            diagnostics: Vec::new(),
            plate_crop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub image_id: String,
    pub stage_order: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<AttributeFilter>,
    pub per_car: Vec<CarResult>,
    /// Set when the image itself could not be processed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl PipelineResult {
    pub fn plate_labels(&self) -> impl Iterator<Item = &PlateLabel> {
        self.per_car.iter().filter_map(|c| c.plate_label.as_ref())
    }

    /// A label implies a plate box, which implies the car passed the filter.
    pub fn provenance_holds(&self) -> bool {
        self.per_car.iter().all(|c| {
            (c.plate_label.is_none() || c.plate_box.is_some()) && (c.plate_box.is_none() || c.passed_filter)
        })
    }
}

/// Crops `bbox` grown by `pad_frac`; returns the crop, the region actually cut.
pub fn crop(img: &DynamicImage, bbox: &BoundingBox, pad_frac: f64) -> (DynamicImage, BoundingBox) {
    let region = bbox.padded(pad_frac, img.width(), img.height());
    let out = img.crop_imm(region.x1, region.y1, region.width(), region.height());
    (out, region)
}

/// [`crop`] plus the PNG encoding sent to the next stage.
pub fn crop_encoded(
    img: &DynamicImage,
    bbox: &BoundingBox,
    pad_frac: f64,
) -> Result<(DynamicImage, BoundingBox, Vec<u8>), image::ImageError> {
    let (out, region) = crop(img, bbox, pad_frac);
    let mut bytes = Vec::new();
    out.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok((out, region, bytes))
}

/// True iff every active attribute is answered affirmatively. Replies that
/// are neither yes nor no count as no.
pub fn check_attribute(
    backend: &dyn Backend,
    car_crop: &[u8],
    filter: &AttributeFilter,
    diagnostics: &mut Vec<String>,
) -> Result<bool, crate::backend::BackendError> {
    for value in filter.values() {
        let q = VisionQuery::new(car_crop.to_vec(), "image/png", &attribute_question(value));
        let reply = backend.query(&q)?;
        match parse_yes_no(&reply.text) {
            Some(true) => {}
            Some(false) => return Ok(false),
            None => {
                diagnostics.push(format!("ambiguous answer to {:?}: {:?}", q.prompt, reply.text));
                return Ok(false);
            }
        }
    }
    Ok(true)
}

pub struct PipelineConfig<'a> {
    pub detect: &'a dyn Backend,
    pub recognize: &'a dyn Backend,
    pub filter: Option<&'a AttributeFilter>,
    pub pad_frac: f64,
}

pub fn run_pipeline(cfg: &PipelineConfig<'_>, image_id: &str, image: &[u8], mime: &str) -> PipelineResult {
    let mut stage_order = vec![Stage::DetectCar];
    if cfg.filter.is_some() {
        stage_order.push(Stage::Filter);
    }
    stage_order.extend([Stage::DetectPlate, Stage::Recognize]);
    let mut result = PipelineResult {
        image_id: image_id.to_string(),
        stage_order,
        filter: cfg.filter.cloned(),
        per_car: Vec::new(),
        failure: None,
        diagnostics: Vec::new(),
    };
    let img = match image::load_from_memory(image) {
        Ok(i) => i,
        Err(e) => {
            result.failure = Some(StageFailure::new(Stage::DetectCar, format!("decoding image: {e}")));
            return result;
        }
    };
    let reply = match cfg.detect.query(&VisionQuery::new(image.to_vec(), mime, DETECT_CAR)) {
        Ok(r) => r,
        Err(e) => {
            result.failure = Some(StageFailure::new(Stage::DetectCar, e.to_string()));
            return result;
        }
    };
    let cars = parse_detections(&reply.text, img.width(), img.height());
    result.diagnostics = cars.diagnostics;
    for det in cars.boxes {
        result.per_car.push(run_car(cfg, &img, det.bbox));
    }
    result
}

fn run_car(cfg: &PipelineConfig<'_>, img: &DynamicImage, car_box: BoundingBox) -> CarResult {
    let mut car = CarResult::new(car_box);
    let fail = |mut car: CarResult, stage, msg: String| {
        car.stage_failed = Some(StageFailure::new(stage, msg));
        car
    };
    let (car_img, car_region, car_bytes) = match crop_encoded(img, &car_box, cfg.pad_frac) {
        Ok(c) => c,
        Err(e) => return fail(car, Stage::DetectPlate, format!("cropping car: {e}")),
    };
    if let Some(filter) = cfg.filter {
        match check_attribute(cfg.detect, &car_bytes, filter, &mut car.diagnostics) {
            Ok(true) => {}
            Ok(false) => return car,
            Err(e) => return fail(car, Stage::Filter, e.to_string()),
        }
    }
    car.passed_filter = true;

    let reply = match cfg.detect.query(&VisionQuery::new(car_bytes, "image/png", DETECT_PLATE)) {
        Ok(r) => r,
        Err(e) => return fail(car, Stage::DetectPlate, e.to_string()),
    };
    let plates = parse_detections(&reply.text, car_img.width(), car_img.height());
    car.diagnostics.extend(plates.diagnostics);
    let Some(first) = plates.boxes.first() else {
        return fail(car, Stage::DetectPlate, "no plate detected".into());
    };
    if plates.boxes.len() > 1 {
        car.diagnostics.push(format!("{} plates detected in one car; using the first", plates.boxes.len()));
    }
    let plate_in_car = first.bbox;
    car.plate_box = Some(plate_in_car.offset_by(&car_region));

    let (_, _, plate_bytes) = match crop_encoded(&car_img, &plate_in_car, cfg.pad_frac) {
        Ok(c) => c,
        Err(e) => return fail(car, Stage::Recognize, format!("cropping plate: {e}")),
    };
    car.plate_crop = Some(plate_bytes.clone());
    let reply = match cfg.recognize.query(&VisionQuery::new(plate_bytes, "image/png", RECOGNIZE)) {
        Ok(r) => r,
        Err(e) => return fail(car, Stage::Recognize, e.to_string()),
    };
    match extract_plate_token(&reply.text, None) {
        Ok(label) => car.plate_label = Some(label),
        Err(_) => return fail(car, Stage::Recognize, format!("no plate-like token in {:?}", reply.text)),
    }
    car
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MulticarScore {
    pub images_correct: usize,
    pub images_total: usize,
    pub plates_correct: usize,
    pub plates_total: usize,
}

impl MulticarScore {
    pub fn image_percent(&self, decimals: u32) -> String {
        percent_half_up(self.images_correct, self.images_total, decimals)
    }

    pub fn plate_percent(&self, decimals: u32) -> String {
        percent_half_up(self.plates_correct, self.plates_total, decimals)
    }
}

fn multiset(labels: impl Iterator<Item = String>) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for l in labels {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

/// An image counts only if its recognized plates equal its true plates as
/// a multiset; each true plate matched by a recognized one counts once.
pub fn eval_multicar(results: &[PipelineResult], manifest: &DatasetManifest) -> Result<MulticarScore, String> {
    let mut by_id = BTreeMap::new();
    for r in results {
        if by_id.insert(r.image_id.as_str(), r).is_some() {
            return Err(format!("duplicate result for image {:?}", r.image_id));
        }
    }
    for id in by_id.keys() {
        if manifest.get(id).is_none() {
            return Err(format!("result for image {id:?} which is not in the manifest"));
        }
    }
    let mut score = MulticarScore::default();
    for rec in &manifest.records {
        let result = by_id
            .get(rec.id.as_str())
            .ok_or_else(|| format!("no result for manifest image {:?}", rec.id))?;
        let truth = rec.truth_plates();
        if truth.is_empty() {
            return Err(format!("manifest image {:?} has no plate labels", rec.id));
        }
        let truth = multiset(truth.iter().map(PlateLabel::text));
        let pred = multiset(result.plate_labels().map(PlateLabel::text));
        let matched: usize = truth
            .iter()
            .map(|(l, &n)| n.min(pred.get(l).copied().unwrap_or(0)))
            .sum();
        let total: usize = truth.values().sum();
        score.plates_correct += matched;
        score.plates_total += total;
        score.images_total += 1;
        if truth == pred {
            score.images_correct += 1;
        }
    }
    Ok(score)
}

/// Runs the pipeline on every manifest image, appending one JSON line per
/// image to `out` in manifest order, and optionally saving plate crops.
pub fn run_manifest(
    cfg: &PipelineConfig<'_>,
    manifest: &DatasetManifest,
    manifest_path: &Path,
    concurrency: usize,
    out: &mut dyn Write,
    crops_dir: Option<&Path>,
) -> std::io::Result<Vec<PipelineResult>> {
    let dir = manifest_dir(manifest_path);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<PipelineResult>>> = Mutex::new(vec![None; manifest.records.len()]);
    std::thread::scope(|s| {
        for _ in 0..concurrency.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(rec) = manifest.records.get(i) else { break };
                let path = dir.join(&rec.path);
                let result = match std::fs::read(&path) {
                    Ok(bytes) => run_pipeline(cfg, &rec.id, &bytes, mime_for_path(&path)),
                    Err(e) => PipelineResult {
                        image_id: rec.id.clone(),
                        stage_order: Vec::new(),
                        filter: cfg.filter.cloned(),
                        per_car: Vec::new(),
                        failure: Some(StageFailure::new(Stage::DetectCar, format!("{}: {e}", path.display()))),
                        diagnostics: Vec::new(),
                    },
                };
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });
    let results: Vec<PipelineResult> = slots.into_inner().unwrap().into_iter().flatten().collect();
    if let Some(dir) = crops_dir {
        std::fs::create_dir_all(dir)?;
    }
    for r in &results {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
        if let Some(dir) = crops_dir {
            for (i, car) in r.per_car.iter().enumerate() {
                if let Some(bytes) = &car.plate_crop {
                    std::fs::write(dir.join(format!("{}_car{i}.png", r.image_id)), bytes)?;
                }
            }
        }
    }
    out.flush()?;
    Ok(results)
}
