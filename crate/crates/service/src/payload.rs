//! Request bodies arrive either as JSON with base64 images or as
//! multipart forms with raw image parts. Both are normalized to a [`Payload`].

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Request};
use axum::http::header::CONTENT_TYPE;
use axum::http::StatusCode;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::RgbImage;
use primid_core::align::LandmarkSet;
use primid_core::pipeline::Landmarks;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::ApiError;

/// Multipart text fields kept verbatim instead of being parsed as JSON.
const STRING_FIELDS: [&str; 3] = ["individual_id", "name", "species"];

#[derive(Clone, Debug)]
pub struct ImageInput {
    pub bytes: Vec<u8>,
    pub landmarks: Option<Landmarks>,
    pub image_ref: Option<String>,
}

impl ImageInput {
    /// The client-supplied ref, or `sha256:<hex>` over the image bytes and landmarks.
    pub fn resolved_ref(&self) -> String {
        if let Some(r) = &self.image_ref {
            return r.clone();
        }
        let mut h = Sha256::new();
        h.update(&self.bytes);
        if let Some(lm) = &self.landmarks {
            for v in [lm.lx, lm.ly, lm.rx, lm.ry, lm.mx, lm.my] {
                h.update(v.to_le_bytes());
            }
        }
        let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        format!("sha256:{hex}")
    }

    pub fn decode(&self) -> Result<RgbImage, ApiError> {
        image::load_from_memory(&self.bytes)
            .map(|i| i.to_rgb8())
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_image", format!("cannot decode image: {e}")))
    }

    pub fn landmark_set(&self) -> Result<Option<LandmarkSet>, ApiError> {
        let image_ref = self.resolved_ref();
        self.landmarks.map(|l| l.to_set(&image_ref)).transpose().map_err(ApiError::from)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Payload {
    pub fields: Map<String, Value>,
    pub images: Vec<ImageInput>,
}

impl Payload {
    pub fn params<T: DeserializeOwned>(&self) -> Result<T, ApiError> {
        serde_json::from_value(Value::Object(self.fields.clone()))
            .map_err(|e| ApiError::bad_request(format!("invalid parameters: {e}")))
    }

    pub fn single_image(&self) -> Result<&ImageInput, ApiError> {
        match self.images.as_slice() {
            [one] => Ok(one),
            [] => Err(ApiError::bad_request("request carries no image")),
            many => Err(ApiError::bad_request(format!("expected one image, got {}", many.len()))),
        }
    }

    fn from_json(value: Value) -> Result<Self, ApiError> {
        let Value::Object(mut fields) = value else {
            return Err(ApiError::bad_request("request body must be a JSON object"));
        };
        let mut images = Vec::new();
        if let Some(image) = fields.remove("image") {
            images.push(json_image(
                image,
                fields.remove("landmarks"),
                fields.remove("image_ref"),
            )?);
        }
        if let Some(list) = fields.remove("images") {
            let Value::Array(list) = list else {
                return Err(ApiError::bad_request("images must be an array"));
            };
            for item in list {
                let Value::Object(mut item) = item else {
                    return Err(ApiError::bad_request("each images entry must be an object"));
                };
                let image = item
                    .remove("image")
                    .ok_or_else(|| ApiError::bad_request("images entry without image"))?;
                images.push(json_image(image, item.remove("landmarks"), item.remove("image_ref"))?);
            }
        }
        Ok(Self { fields, images })
    }

    async fn from_multipart(mut mp: Multipart) -> Result<Self, ApiError> {
        let bad = |e: axum::extract::multipart::MultipartError| ApiError::bad_request(format!("multipart: {e}"));
        let mut fields = Map::new();
        let mut bytes = Vec::new();
        let mut landmarks = Vec::new();
        let mut refs = Vec::new();
        while let Some(field) = mp.next_field().await.map_err(bad)? {
            let name = field.name().unwrap_or_default().to_string();
            match name.as_str() {
                "image" => bytes.push(field.bytes().await.map_err(bad)?.to_vec()),
                "landmarks" => landmarks.push(parse_landmarks(&field.text().await.map_err(bad)?)?),
                "image_ref" => refs.push(field.text().await.map_err(bad)?),
                _ => {
                    let text = field.text().await.map_err(bad)?;
                    let value = if STRING_FIELDS.contains(&name.as_str()) {
                        Value::String(text)
                    } else {
                        serde_json::from_str(&text).unwrap_or(Value::String(text))
                    };
                    fields.insert(name, value);
                }
            }
        }
        if landmarks.len() > bytes.len() || refs.len() > bytes.len() {
            return Err(ApiError::bad_request("more landmarks or image_ref parts than images"));
        }
        let mut landmarks = landmarks.into_iter();
        let mut refs = refs.into_iter();
        let images = bytes
            .into_iter()
            .map(|bytes| ImageInput {
                bytes,
                landmarks: landmarks.next().flatten(),
                image_ref: refs.next(),
            })
            .collect();
        Ok(Self { fields, images })
    }
}

fn parse_landmarks(text: &str) -> Result<Option<Landmarks>, ApiError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| ApiError::bad_request(format!("landmarks are not JSON: {e}")))?;
    landmarks_value(Some(value))
}

fn landmarks_value(value: Option<Value>) -> Result<Option<Landmarks>, ApiError> {
    match value {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| ApiError::bad_request(format!("invalid landmarks: {e}"))),
    }
}

fn json_image(image: Value, landmarks: Option<Value>, image_ref: Option<Value>) -> Result<ImageInput, ApiError> {
    let Value::String(data) = image else {
        return Err(ApiError::bad_request("image must be a base64 string"));
    };
    let b64 = match data.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => data.as_str(),
    };
    let bytes = STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_image", format!("image is not valid base64: {e}")))?;
    let image_ref = match image_ref {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(ApiError::bad_request("image_ref must be a string")),
    };
    Ok(ImageInput {
        bytes,
        landmarks: landmarks_value(landmarks)?,
        image_ref,
    })
}

impl<S: Send + Sync> FromRequest<S> for Payload {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        let content_type = req
            .headers()
            .get(CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or_default()
            .to_ascii_lowercase();
        if content_type.starts_with("application/json") {
            let body = Bytes::from_request(req, state)
                .await
                .map_err(|e| ApiError::new(e.status(), "invalid_body", e.body_text()))?;
            let value: Value = serde_json::from_slice(&body)
                .map_err(|e| ApiError::bad_request(format!("malformed JSON: {e}")))?;
            Self::from_json(value)
        } else if content_type.starts_with("multipart/form-data") {
            let mp = Multipart::from_request(req, state)
                .await
                .map_err(|e| ApiError::new(e.status(), "invalid_body", e.body_text()))?;
            Self::from_multipart(mp).await
        } else {
            Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "unsupported_media_type",
                format!("expected application/json or multipart/form-data, got {content_type:?}"),
            ))
        }
    }
}
