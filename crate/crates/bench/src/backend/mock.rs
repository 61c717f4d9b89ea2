//! Offline backend answering from registered ground truth.
//!
//! Images are identified by the SHA-256 of their encoded bytes. Each known
//! image may carry a plate label, attribute tags and scripted replies per
//! prompt. Recognition replies pass the label through the seeded
//! [`ErrorModel`]; `Is this car X?` is answered from the tags.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use plate_core::detect::{encode_box, parse_detections, BoundingBox};
use plate_core::mock::ErrorModel;
use plate_core::prompts::{parse_attribute_question, DETECT_CAR, DETECT_PLATE};
use plate_core::PlateLabel;
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, ErrorKind, VisionQuery, VisionReply};
use crate::manifest::{manifest_dir, DatasetManifest};
use crate::pipeline::crop_encoded;

pub type ImageDigest = [u8; 32];

pub fn content_digest(bytes: &[u8]) -> ImageDigest {
    Sha256::digest(bytes).into()
}

#[derive(Debug, Default, Clone)]
struct Known {
    label: Option<PlateLabel>,
    tags: BTreeSet<String>,
    replies: HashMap<String, String>,
}

/// One car in a composed multi-car scene; boxes are in scene pixels.
#[derive(Debug, Clone)]
pub struct SceneCar {
    pub car_box: BoundingBox,
    pub plate_box: BoundingBox,
    pub label: PlateLabel,
    pub tags: BTreeSet<String>,
}

pub struct MockBackend {
    id: String,
    model: ErrorModel,
    known: HashMap<ImageDigest, Known>,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(id: &str, model: ErrorModel) -> Result<Self, plate_core::Error> {
        model.validate()?;
        Ok(Self {
            id: id.to_string(),
            model,
            known: HashMap::new(),
            calls: AtomicU64::new(0),
        })
    }

    /// Registers every image of a manifest under its label and tags.
    pub fn with_manifest(mut self, manifest: &DatasetManifest, manifest_path: &Path) -> std::io::Result<Self> {
        let dir = manifest_dir(manifest_path);
        for r in &manifest.records {
            let path = dir.join(&r.path);
            let bytes = std::fs::read(&path)
                .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
            self.register_image(&bytes, r.label.clone(), r.tags.clone());
        }
        Ok(self)
    }

    pub fn register_image(&mut self, image: &[u8], label: Option<PlateLabel>, tags: BTreeSet<String>) {
        let k = self.known.entry(content_digest(image)).or_default();
        k.label = label;
        k.tags = tags;
    }

    /// Fixes the reply for one (image, prompt) pair; takes precedence over everything else.
    pub fn register_reply(&mut self, image: &[u8], prompt: &str, reply: &str) {
        self.known
            .entry(content_digest(image))
            .or_default()
            .replies
            .insert(prompt.to_string(), reply.to_string());
    }

    /// Scripts detection for a scene so that the pipeline's own crops are
    /// recognized: the scene answers `detect car`, each car crop answers
    /// `detect license plate` and its tags, each plate crop carries the
    /// label. Returns the encoded plate crops in car order.
    pub fn register_scene(
        &mut self,
        scene: &[u8],
        cars: &[SceneCar],
        pad_frac: f64,
    ) -> Result<Vec<Vec<u8>>, image::ImageError> {
        let img = image::load_from_memory(scene)?;
        let (w, h) = (img.width(), img.height());
        let car_reply = cars
            .iter()
            .map(|c| format!("{} car", encode_box(&c.car_box, w, h)))
            .collect::<Vec<_>>()
            .join(" ; ");
        self.register_reply(scene, DETECT_CAR, &car_reply);
        // crop from the boxes as the pipeline will parse them
        let parsed = parse_detections(&car_reply, w, h);
        let mut plates = Vec::with_capacity(cars.len());
        for (car, det) in cars.iter().zip(&parsed.boxes) {
            let (car_img, car_region, car_bytes) = crop_encoded(&img, &det.bbox, pad_frac)?;
            let rel = BoundingBox {
                x1: car.plate_box.x1.saturating_sub(car_region.x1),
                y1: car.plate_box.y1.saturating_sub(car_region.y1),
                x2: car.plate_box.x2.saturating_sub(car_region.x1).min(car_img.width()),
                y2: car.plate_box.y2.saturating_sub(car_region.y1).min(car_img.height()),
                source: car.plate_box.source,
            };
            let (cw, ch) = (car_img.width(), car_img.height());
            let plate_reply = format!("{} license plate", encode_box(&rel, cw, ch));
            self.register_image(&car_bytes, None, car.tags.clone());
            self.register_reply(&car_bytes, DETECT_PLATE, &plate_reply);
            let Some(plate_det) = parse_detections(&plate_reply, cw, ch).boxes.first().cloned() else {
                continue;
            };
            let (_, _, plate_bytes) = crop_encoded(&car_img, &plate_det.bbox, pad_frac)?;
            self.register_image(&plate_bytes, Some(car.label.clone()), car.tags.clone());
            plates.push(plate_bytes);
        }
        Ok(plates)
    }

    /// Number of queries answered so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn answer(&self, q: &VisionQuery) -> Result<String, BackendError> {
        let known = self.known.get(&content_digest(&q.image)).ok_or_else(|| {
            BackendError::new(ErrorKind::Permanent, "image is not in the mock's truth source")
        })?;
        if let Some(r) = known.replies.get(&q.prompt) {
            return Ok(r.clone());
        }
        if let Some(value) = parse_attribute_question(&q.prompt) {
            let yes = known.tags.iter().any(|t| t.eq_ignore_ascii_case(value));
            return Ok(if yes { "Yes." } else { "No." }.to_string());
        }
        if q.prompt == DETECT_CAR || q.prompt == DETECT_PLATE {
            return Ok(String::new());
        }
        Ok(known
            .label
            .as_ref()
            .map(|l| self.model.corrupt(l, query_salt(q)))
            .unwrap_or_default())
    }
}

/// Per-query salt so each (prompt, image) pair draws its own errors.
fn query_salt(q: &VisionQuery) -> u64 {
    let mut h = Sha256::new();
    h.update((q.prompt.len() as u64).to_le_bytes());
    h.update(q.prompt.as_bytes());
    h.update(&q.image[..]);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn query(&self, q: &VisionQuery) -> Result<VisionReply, BackendError> {
        q.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut text = self.answer(q)?;
        if text.chars().count() > q.max_output_chars {
            text = text.chars().take(q.max_output_chars).collect();
        }
        Ok(VisionReply {
            text,
            latency_ms: 0,
            backend_id: self.id.clone(),
            cached: false,
        })
    }

    fn check(&self) -> Result<VisionReply, BackendError> {
        Ok(VisionReply {
            text: "OK".into(),
            latency_ms: 0,
            backend_id: self.id.clone(),
            cached: false,
        })
    }
}
