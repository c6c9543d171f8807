//! Adapter for real models hosted by an external program.
//!
//! The program is invoked once per request as `<program> <role>`. It reads a
//! single JSON object on stdin and writes a single JSON object on stdout.
//! Images travel as base64-encoded PNG under `image_png`.
//!
//! | role        | request fields                       | response fields                  |
//! |-------------|--------------------------------------|----------------------------------|
//! | `captioner` | `image_png`                          | `caption`                        |
//! | `embedder`  | `text`                               | `embedding` (array of numbers)   |
//! | `detector`  | `image_png`, `category_hint`         | `boxes` (array of box objects)   |
//! | `segmenter` | `image_png`, `box`, `points`         | `width`, `height`, `cells` (0/1) |
//! | `saliency`  | `image_png`, `label`                 | `width`, `height`, `values`      |

use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::OnceLock;

use base64::Engine;
use image::RgbImage;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    sort_detections, validate_prompt, Captioner, Detector, Role, SaliencyMapper, Segmenter,
    TextEmbedder,
};
use crate::error::{Error, Result};
use crate::prompt::PromptBundle;
use crate::types::{BBox, BinaryMask, Caption, EmbeddingVector, Heatmap};

#[derive(Debug)]
pub struct ExternalBackend {
    role: Role,
    program: PathBuf,
    dim: OnceLock<usize>,
}

impl ExternalBackend {
    pub fn open(role: Role, program: impl Into<PathBuf>) -> Result<Self> {
        let program = program.into();
        if !program.is_file() {
            return Err(Error::BackendUnavailable(format!(
                "{} program {} does not exist",
                role.name(),
                program.display()
            )));
        }
        Ok(ExternalBackend {
            role,
            program,
            dim: OnceLock::new(),
        })
    }

    pub fn program(&self) -> &Path {
        &self.program
    }

    fn expect_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::Backend(format!(
                "{} backend called as {}",
                self.role.name(),
                role.name()
            )));
        }
        Ok(())
    }

    fn call<T: for<'de> Deserialize<'de>>(&self, request: Value) -> Result<T> {
        let mut child = Command::new(&self.program)
            .arg(self.role.name())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| {
                Error::BackendUnavailable(format!("cannot start {}: {e}", self.program.display()))
            })?;
        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            let body = serde_json::to_vec(&request).expect("request is valid JSON");
            stdin
                .write_all(&body)
                .map_err(|e| Error::Backend(format!("writing request: {e}")))?;
        }
        let output = child
            .wait_with_output()
            .map_err(|e| Error::Backend(format!("waiting for {}: {e}", self.program.display())))?;
        if !output.status.success() {
            return Err(Error::Backend(format!(
                "{} exited with {}: {}",
                self.program.display(),
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        serde_json::from_slice(&output.stdout)
            .map_err(|e| Error::Backend(format!("bad response: {e}")))
    }
}

fn encode_png(image: &RgbImage) -> Result<String> {
    let mut bytes = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Backend(format!("encoding image: {e}")))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    embedding: Vec<f32>,
}

#[derive(Deserialize)]
struct DetectionResponse {
    boxes: Vec<BBox>,
}

#[derive(Deserialize)]
struct GridResponse<T> {
    width: u32,
    height: u32,
    #[serde(alias = "values")]
    cells: Vec<T>,
}

impl Captioner for ExternalBackend {
    fn caption(&self, image: &RgbImage) -> Result<Caption> {
        self.expect_role(Role::Captioner)?;
        let response: CaptionResponse = self.call(json!({ "image_png": encode_png(image)? }))?;
        Caption::new(response.caption)
    }
}

impl TextEmbedder for ExternalBackend {
    fn dim(&self) -> usize {
        if let Some(&dim) = self.dim.get() {
            return dim;
        }
        self.embed("dimension probe").map(|v| v.dim()).unwrap_or(0)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        self.expect_role(Role::Embedder)?;
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        let response: EmbeddingResponse = self.call(json!({ "text": text }))?;
        let vector = EmbeddingVector::new(response.embedding)?;
        let dim = *self.dim.get_or_init(|| vector.dim());
        if vector.dim() != dim {
            return Err(Error::Backend(format!(
                "embedder changed dimension from {dim} to {}",
                vector.dim()
            )));
        }
        Ok(vector)
    }
}

impl Detector for ExternalBackend {
    fn detect(&self, image: &RgbImage, category_hint: Option<&str>) -> Result<Vec<BBox>> {
        self.expect_role(Role::Detector)?;
        let response: DetectionResponse = self.call(json!({
            "image_png": encode_png(image)?,
            "category_hint": category_hint,
        }))?;
        let (width, height) = image.dimensions();
        let mut boxes: Vec<BBox> = response
            .boxes
            .into_iter()
            .filter(|b| b.is_valid_in(width, height))
            .filter(|b| category_hint.is_none_or(|hint| b.label == hint))
            .collect();
        sort_detections(&mut boxes);
        Ok(boxes)
    }
}

impl Segmenter for ExternalBackend {
    fn segment(&self, image: &RgbImage, prompt: &PromptBundle) -> Result<BinaryMask> {
        self.expect_role(Role::Segmenter)?;
        validate_prompt(image.dimensions(), prompt)?;
        let b = &prompt.bbox;
        let points: Vec<[u32; 2]> = prompt.points.iter().map(|p| [p.x, p.y]).collect();
        let response: GridResponse<u8> = self.call(json!({
            "image_png": encode_png(image)?,
            "box": [b.x_min, b.y_min, b.x_max, b.y_max],
            "points": points,
        }))?;
        if (response.width, response.height) != image.dimensions() {
            return Err(Error::Backend(format!(
                "segmenter returned {}x{} mask for {}x{} image",
                response.width,
                response.height,
                image.width(),
                image.height()
            )));
        }
        BinaryMask::from_raw(response.width, response.height, response.cells)
    }
}

impl SaliencyMapper for ExternalBackend {
    fn saliency_map(&self, image: &RgbImage, label: &str) -> Result<Heatmap> {
        self.expect_role(Role::Saliency)?;
        let response: GridResponse<f32> = self.call(json!({
            "image_png": encode_png(image)?,
            "label": label,
        }))?;
        if (response.width, response.height) != image.dimensions() {
            return Err(Error::Backend(
                "saliency map size differs from image".into(),
            ));
        }
        Heatmap::new(response.width, response.height, response.cells, label)
    }
}
