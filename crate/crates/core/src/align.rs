//! Landmark-based face alignment.
//!
//! Every face carries three manually annotated landmarks (left eye, right eye,
//! mouth center). The landmarks of a whole dataset are reduced to a single
//! dimensionless landmark template; each face is then mapped onto that
//! template by a four-parameter similarity transform fitted in the least
//! squares sense, and resampled into a fixed-size canonical crop.

use std::io::Read;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the canonical crop in pixels.
pub const CROP_WIDTH: u32 = 96;
/// Height of the canonical crop in pixels.
pub const CROP_HEIGHT: u32 = 112;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("degenerate landmarks for {image}: {reason}")]
    DegenerateLandmarks { image: String, reason: String },
    #[error("landmark template requires at least one landmark set")]
    EmptyDataset,
    #[error("least-squares system is singular")]
    SingularSystem,
    #[error("invalid similarity parameters: {0}")]
    InvalidParams(String),
    #[error("invalid template geometry: {0}")]
    InvalidTemplate(String),
    #[error("landmark {point} of {image} lies outside the {width}x{height} image")]
    OutOfBounds {
        image: String,
        point: &'static str,
        width: u32,
        height: u32,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Point = [f64; 2];

/// Three annotated points on a source image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub image_ref: String,
    pub left_eye: Point,
    pub right_eye: Point,
    pub mouth: Point,
}

impl LandmarkSet {
    /// Builds a landmark set, rejecting non-finite, duplicate, or collinear points.
    pub fn new(
        image_ref: impl Into<String>,
        left_eye: Point,
        right_eye: Point,
        mouth: Point,
    ) -> Result<Self, AlignError> {
        let lm = Self {
            image_ref: image_ref.into(),
            left_eye,
            right_eye,
            mouth,
        };
        lm.validate()?;
        Ok(lm)
    }

    pub fn points(&self) -> [Point; 3] {
        [self.left_eye, self.right_eye, self.mouth]
    }

    fn degenerate(&self, reason: impl Into<String>) -> AlignError {
        AlignError::DegenerateLandmarks {
            image: self.image_ref.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        let pts = self.points();
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(self.degenerate("non-finite coordinate"));
        }
        for i in 0..3 {
            for j in (i + 1)..3 {
                if pts[i] == pts[j] {
                    return Err(self.degenerate("duplicate points"));
                }
            }
        }
        let [p, q, r] = pts;
        let cross = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
        let longest = [dist2(p, q), dist2(q, r), dist2(p, r)]
            .into_iter()
            .fold(0.0, f64::max);
        if cross.abs() <= 1e-9 * longest {
            return Err(self.degenerate("collinear points"));
        }
        Ok(())
    }

    /// Checks every point lies inside a `width`×`height` image.
    pub fn check_bounds(&self, width: u32, height: u32) -> Result<(), AlignError> {
        let names = ["left_eye", "right_eye", "mouth"];
        for (name, p) in names.into_iter().zip(self.points()) {
            let inside = p[0] >= 0.0
                && p[1] >= 0.0
                && p[0] <= f64::from(width) - 1.0
                && p[1] <= f64::from(height) - 1.0;
            if !inside {
                return Err(AlignError::OutOfBounds {
                    image: self.image_ref.clone(),
                    point: name,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }
}

fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Landmarks relative to their centroid, laid out `[x1, x2, x3, y1, y2, y3]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenteredLandmarkVector(pub [f64; 6]);

impl CenteredLandmarkVector {
    pub fn norm_squared(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

pub fn center_landmarks(lm: &LandmarkSet) -> Result<CenteredLandmarkVector, AlignError> {
    lm.validate()?;
    let pts = lm.points();
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 3.0;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 3.0;
    let mut l = [0.0; 6];
    for (j, p) in pts.iter().enumerate() {
        l[j] = p[0] - cx;
        l[j + 3] = p[1] - cy;
    }
    Ok(CenteredLandmarkVector(l))
}

/// How each centered landmark vector is scaled before averaging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateNormalization {
    /// Divide by the squared Euclidean norm.
    #[default]
    SquaredNorm,
    /// Divide by the Euclidean norm.
    Norm,
}

/// Placement of the dimensionless template on the output canvas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanvasGeometry {
    pub canvas: [u32; 2],
    pub centroid: Point,
    /// Distance between the anchored eye targets, in pixels.
    pub inter_ocular: f64,
}

impl Default for CanvasGeometry {
    fn default() -> Self {
        Self {
            canvas: [CROP_WIDTH, CROP_HEIGHT],
            centroid: [48.0, 56.0],
            inter_ocular: 40.0,
        }
    }
}

/// Dataset-average landmark geometry, anchored to pixel targets on a canvas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTemplate {
    pub t: [f64; 6],
    pub canvas: [u32; 2],
    pub anchor_scale: f64,
    pub anchor_offset: Point,
}

impl LandmarkTemplate {
    /// Anchors a dimensionless template vector so its centroid lands on
    /// `geometry.centroid` with the requested inter-ocular distance.
    pub fn anchored(t: [f64; 6], geometry: &CanvasGeometry) -> Result<Self, AlignError> {
        let eye_dist = ((t[1] - t[0]).powi(2) + (t[4] - t[3]).powi(2)).sqrt();
        if !(eye_dist.is_finite() && eye_dist > 0.0) {
            return Err(AlignError::InvalidTemplate("template eyes coincide".into()));
        }
        if !(geometry.inter_ocular > 0.0) {
            return Err(AlignError::InvalidTemplate(
                "inter-ocular distance must be positive".into(),
            ));
        }
        let template = Self {
            t,
            canvas: geometry.canvas,
            anchor_scale: geometry.inter_ocular / eye_dist,
            anchor_offset: geometry.centroid,
        };
        let [w, h] = template.canvas;
        for p in template.target_points() {
            if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < f64::from(w) && p[1] < f64::from(h)) {
                return Err(AlignError::InvalidTemplate(format!(
                    "anchored target ({:.2}, {:.2}) falls outside the {w}x{h} canvas",
                    p[0], p[1]
                )));
            }
        }
        Ok(template)
    }

    /// Template built from a single nominal frontal face; used when no
    /// dataset template is available.
    pub fn canonical() -> Self {
        let nominal =
            LandmarkSet::new("canonical", [30.0, 40.0], [70.0, 40.0], [50.0, 80.0]).unwrap();
        compute_landmark_template(
            std::slice::from_ref(&nominal),
            &CanvasGeometry::default(),
            TemplateNormalization::default(),
        )
        .unwrap()
    }

    /// Pixel targets for left eye, right eye and mouth on the canvas.
    pub fn target_points(&self) -> [Point; 3] {
        let s = self.anchor_scale;
        let [ox, oy] = self.anchor_offset;
        std::array::from_fn(|j| [ox + s * self.t[j], oy + s * self.t[j + 3]])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AlignError> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AlignError> {
        let template: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if !(template.anchor_scale > 0.0) || template.t.iter().any(|v| !v.is_finite()) {
            return Err(AlignError::InvalidTemplate(
                "template file has non-positive scale or non-finite entries".into(),
            ));
        }
        Ok(template)
    }
}

/// Averages `L_i / |L_i|^2` (or `/ |L_i|`) over the dataset and anchors the
/// result on the canvas.
pub fn compute_landmark_template(
    dataset: &[LandmarkSet],
    geometry: &CanvasGeometry,
    normalization: TemplateNormalization,
) -> Result<LandmarkTemplate, AlignError> {
    if dataset.is_empty() {
        return Err(AlignError::EmptyDataset);
    }
    let mut t = [0.0; 6];
    for lm in dataset {
        let l = center_landmarks(lm)?;
        let denom = match normalization {
            TemplateNormalization::SquaredNorm => l.norm_squared(),
            TemplateNormalization::Norm => l.norm_squared().sqrt(),
        };
        for (acc, v) in t.iter_mut().zip(l.0) {
            *acc += v / denom;
        }
    }
    let n = dataset.len() as f64;
    t.iter_mut().for_each(|v| *v /= n);
    LandmarkTemplate::anchored(t, geometry)
}

/// Similarity transform `p' = [[a, -b], [b, a]] p + m` with `a = s cos θ`,
/// `b = s sin θ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub a: f64,
    pub b: f64,
    pub m_x: f64,
    pub m_y: f64,
}

impl SimilarityParams {
    pub const IDENTITY: Self = Self {
        a: 1.0,
        b: 0.0,
        m_x: 0.0,
        m_y: 0.0,
    };

    pub fn from_scale_rotation(scale: f64, theta: f64, m_x: f64, m_y: f64) -> Self {
        Self {
            a: scale * theta.cos(),
            b: scale * theta.sin(),
            m_x,
            m_y,
        }
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn rotation(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn apply(&self, p: Point) -> Point {
        [
            self.a * p[0] - self.b * p[1] + self.m_x,
            self.b * p[0] + self.a * p[1] + self.m_y,
        ]
    }

    pub fn inverse(&self) -> Result<Self, AlignError> {
        let s2 = self.a * self.a + self.b * self.b;
        if !(s2 > 0.0 && s2.is_finite()) {
            return Err(AlignError::InvalidParams(format!(
                "scale must be positive and finite, got {}",
                s2.sqrt()
            )));
        }
        let (ia, ib) = (self.a / s2, -self.b / s2);
        Ok(Self {
            a: ia,
            b: ib,
            m_x: -(ia * self.m_x - ib * self.m_y),
            m_y: -(ib * self.m_x + ia * self.m_y),
        })
    }

    /// Sum of squared distances between mapped sources and targets.
    pub fn residual(&self, source: &[Point], target: &[Point]) -> f64 {
        source
            .iter()
            .zip(target)
            .map(|(&p, &q)| dist2(self.apply(p), q))
            .sum()
    }
}

/// Least-squares similarity fit over arbitrary point correspondences using
/// the normal equations of the `2n x 4` system `A x = b`.
pub fn fit_similarity(source: &[Point], target: &[Point]) -> Result<SimilarityParams, AlignError> {
    assert_eq!(source.len(), target.len(), "correspondence count mismatch");
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    for (&[x, y], &[tx, ty]) in source.iter().zip(target) {
        let rows = [(Vector4::new(x, -y, 1.0, 0.0), tx), (Vector4::new(y, x, 0.0, 1.0), ty)];
        for (row, rhs) in rows {
            ata += row * row.transpose();
            atb += row * rhs;
        }
    }
    let sol = ata.lu().solve(&atb).ok_or(AlignError::SingularSystem)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(AlignError::SingularSystem);
    }
    let params = SimilarityParams {
        a: sol[0],
        b: sol[1],
        m_x: sol[2],
        m_y: sol[3],
    };
    if !(params.scale() > 0.0) {
        return Err(AlignError::InvalidParams("zero-scale solution".into()));
    }
    Ok(params)
}

/// Fits the transform mapping `source` landmarks onto the anchored template.
pub fn solve_similarity(
    source: &LandmarkSet,
    template: &LandmarkTemplate,
) -> Result<SimilarityParams, AlignError> {
    source.validate()?;
    fit_similarity(&source.points(), &template.target_points())
}

/// Resamples `img` onto a `canvas` grid: each output pixel reads the source at
/// the inverse-transformed location with bilinear interpolation; samples that
/// fall outside the source contribute zero.
pub fn warp_image(
    img: &RgbImage,
    params: &SimilarityParams,
    canvas: [u32; 2],
) -> Result<RgbImage, AlignError> {
    let inv = params.inverse()?;
    let [cw, ch] = canvas;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let fetch = |x: i64, y: i64| -> [f64; 3] {
        if x < 0 || y < 0 || x >= w || y >= h {
            [0.0; 3]
        } else {
            let Rgb(p) = *img.get_pixel(x as u32, y as u32);
            p.map(f64::from)
        }
    };
    let mut out = RgbImage::new(cw, ch);
    for (u, v, px) in out.enumerate_pixels_mut() {
        let [sx, sy] = inv.apply([f64::from(u), f64::from(v)]);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let p00 = fetch(x0, y0);
        let p10 = fetch(x0 + 1, y0);
        let p01 = fetch(x0, y0 + 1);
        let p11 = fetch(x0 + 1, y0 + 1);
        let mut rgb = [0u8; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
            let val = top * (1.0 - fy) + bottom * fy;
            rgb[c] = val.round().clamp(0.0, 255.0) as u8;
        }
        *px = Rgb(rgb);
    }
    Ok(out)
}

/// Solves the transform for `landmarks` and warps `img` onto the template canvas.
pub fn align_face(
    img: &RgbImage,
    landmarks: &LandmarkSet,
    template: &LandmarkTemplate,
) -> Result<(RgbImage, SimilarityParams), AlignError> {
    landmarks.check_bounds(img.width(), img.height())?;
    let params = solve_similarity(landmarks, template)?;
    let crop = warp_image(img, &params, template.canvas)?;
    Ok((crop, params))
}

#[derive(Debug, Deserialize, Serialize)]
struct LandmarkRow {
    image: String,
    lx: f64,
    ly: f64,
    rx: f64,
    ry: f64,
    mx: f64,
    my: f64,
}

/// Parses landmark CSV rows (`image,lx,ly,rx,ry,mx,my`). Each row is returned
/// separately so one bad row does not discard the rest.
pub fn read_landmark_csv<R: Read>(reader: R) -> Vec<Result<LandmarkSet, AlignError>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize::<LandmarkRow>()
        .map(|row| {
            let row = row?;
            LandmarkSet::new(row.image, [row.lx, row.ly], [row.rx, row.ry], [row.mx, row.my])
        })
        .collect()
}
