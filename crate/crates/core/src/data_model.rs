//! Shared domain types for the try-on pipeline and their validation.
//!
//! Every type here is immutable after construction. Constructors enforce the
//! hard invariants (shape, finiteness, value range); softer conditions such as
//! mask coverage are reported by [`validate_sample`] instead of failing.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{invalid, shape_err, Result};

/// Smallest spatial side an [`ImageTensor`] may have.
pub const MIN_IMAGE_SIDE: usize = 8;
/// Per-component sanity bound on flow displacements (normalized units).
pub const MAX_FLOW_COMPONENT: f32 = 2.0;
/// Minimum fraction of inpaint pixels for a usable agnostic mask.
pub const MIN_MASK_FOREGROUND: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// Values in `[0, 1]`.
    Unit,
    /// Values in `[-1, 1]`.
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }
}

/// Channel-major `[channels, height, width]` array of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Array3 {
    data: Vec<f32>,
    channels: usize,
    height: usize,
    width: usize,
}

impl Array3 {
    pub fn new(data: Vec<f32>, channels: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != channels * height * width {
            return shape_err(format!(
                "array of {} values cannot be viewed as [{channels}, {height}, {width}]",
                data.len()
            ));
        }
        Ok(Self {
            data,
            channels,
            height,
            width,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: vec![0.0; channels * height * width],
            channels,
            height,
            width,
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            data,
            channels,
            height,
            width,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// An image with a declared value range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    array: Array3,
    range: ValueRange,
}

impl ImageTensor {
    /// Builds an image, rejecting non-finite or out-of-range values and sides
    /// smaller than [`MIN_IMAGE_SIDE`].
    pub fn new(array: Array3, range: ValueRange) -> Result<Self> {
        if array.height < MIN_IMAGE_SIDE || array.width < MIN_IMAGE_SIDE {
            return shape_err(format!(
                "image {}x{} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                array.height, array.width
            ));
        }
        let (lo, hi) = range.bounds();
        if let Some(v) = array.data.iter().find(|v| !(**v >= lo && **v <= hi)) {
            return invalid(format!("image value {v} outside {range:?} range"));
        }
        Ok(Self { array, range })
    }

    /// Clamps into the range instead of rejecting. NaN maps to the lower bound.
    pub fn clamped(array: Array3, range: ValueRange) -> Result<Self> {
        let (lo, hi) = range.bounds();
        let array = array.map(|v| if v.is_nan() { lo } else { v.clamp(lo, hi) });
        Self::new(array, range)
    }

    /// Skips every check. Intended for loaders and for exercising
    /// [`validate_sample`]; the result may violate the type's invariants.
    pub fn new_unchecked(array: Array3, range: ValueRange) -> Self {
        Self { array, range }
    }

    pub fn array(&self) -> &Array3 {
        &self.array
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn channels(&self) -> usize {
        self.array.channels
    }

    pub fn height(&self) -> usize {
        self.array.height
    }

    pub fn width(&self) -> usize {
        self.array.width
    }

    pub fn data(&self) -> &[f32] {
        &self.array.data
    }

    pub fn to_unit(&self) -> ImageTensor {
        match self.range {
            ValueRange::Unit => self.clone(),
            ValueRange::Signed => ImageTensor {
                array: self.array.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)),
                range: ValueRange::Unit,
            },
        }
    }

    pub fn to_signed(&self) -> ImageTensor {
        match self.range {
            ValueRange::Signed => self.clone(),
            ValueRange::Unit => ImageTensor {
                array: self.array.map(|v| (v * 2.0 - 1.0).clamp(-1.0, 1.0)),
                range: ValueRange::Signed,
            },
        }
    }
}

/// Dense backward warp flow `[h, w, 2]` in normalized coordinates: component 0
/// is the x displacement in units of the image width, component 1 the y
/// displacement in units of the image height.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFlow {
    data: Vec<f32>,
    height: usize,
    width: usize,
}

impl DenseFlow {
    pub fn new(data: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 2 {
            return shape_err(format!(
                "flow of {} values cannot be viewed as [{height}, {width}, 2]",
                data.len()
            ));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !(v.is_finite() && v.abs() <= MAX_FLOW_COMPONENT))
        {
            return invalid(format!(
                "flow component {v} is non-finite or exceeds {MAX_FLOW_COMPONENT}"
            ));
        }
        Ok(Self {
            data,
            height,
            width,
        })
    }

    pub fn new_unchecked(data: Vec<f32>, height: usize, width: usize) -> Self {
        Self {
            data,
            height,
            width,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: vec![0.0; height * width * 2],
            height,
            width,
        }
    }

    pub fn constant(height: usize, width: usize, dx: f32, dy: f32) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| [dx, dy]).collect();
        Self::new(data, height, width)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                data.push(dx);
                data.push(dy);
            }
        }
        Self::new(data, height, width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn mean_magnitude(&self) -> f32 {
        let n = self.height * self.width;
        let total: f64 = self
            .data
            .chunks_exact(2)
            .map(|d| ((d[0] as f64).powi(2) + (d[1] as f64).powi(2)).sqrt())
            .sum();
        (total / n as f64) as f32
    }

    /// Mean Euclidean distance between corresponding displacement vectors.
    pub fn mean_endpoint_error(&self, other: &DenseFlow) -> Result<f32> {
        if self.height != other.height || self.width != other.width {
            return shape_err("endpoint error between flows of different resolution");
        }
        let total: f64 = self
            .data
            .chunks_exact(2)
            .zip(other.data.chunks_exact(2))
            .map(|(a, b)| (((a[0] - b[0]) as f64).powi(2) + ((a[1] - b[1]) as f64).powi(2)).sqrt())
            .sum();
        Ok((total / (self.height * self.width) as f64) as f32)
    }
}

/// Binary inpainting mask `[1, H, W]`; 1 marks the region to regenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct AgnosticMask {
    data: Vec<f32>,
    height: usize,
    width: usize,
}

impl AgnosticMask {
    /// Rejects non-binary values. Coverage is checked by [`validate_sample`].
    pub fn new(data: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!("mask of {} values is not {height}x{width}", data.len()));
        }
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return invalid("mask not binary");
        }
        Ok(Self {
            data,
            height,
            width,
        })
    }

    pub fn new_unchecked(data: Vec<f32>, height: usize, width: usize) -> Self {
        Self {
            data,
            height,
            width,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new_unchecked(vec![0.0; height * width], height, width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn foreground_fraction(&self) -> f32 {
        let on = self.data.iter().filter(|&&v| v >= 0.5).count();
        on as f32 / self.data.len().max(1) as f32
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Rendered pose skeleton, 3 channels in unit range.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonMap(ImageTensor);

impl SkeletonMap {
    pub fn new(image: ImageTensor) -> Result<Self> {
        if image.channels() != 3 || image.range() != ValueRange::Unit {
            return shape_err("skeleton map must be a 3-channel unit-range image");
        }
        Ok(Self(image))
    }

    pub fn image(&self) -> &ImageTensor {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointName {
    Head,
    Neck,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
}

impl JointName {
    pub const ALL: [JointName; 10] = [
        JointName::Head,
        JointName::Neck,
        JointName::LeftShoulder,
        JointName::RightShoulder,
        JointName::LeftElbow,
        JointName::RightElbow,
        JointName::LeftWrist,
        JointName::RightWrist,
        JointName::LeftHip,
        JointName::RightHip,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&j| j == self).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: JointName,
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

/// Upper-body pose over the fixed ten-joint vocabulary, normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseKeypoints {
    joints: Vec<Joint>,
}

impl PoseKeypoints {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        for (i, j) in joints.iter().enumerate() {
            if !(0.0..=1.0).contains(&j.x) || !(0.0..=1.0).contains(&j.y) {
                return invalid(format!("joint {:?} at ({}, {}) outside [0,1]", j.name, j.x, j.y));
            }
            if joints[..i].iter().any(|k| k.name == j.name) {
                return invalid(format!("duplicate joint {:?}", j.name));
            }
        }
        Ok(Self { joints })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn get(&self, name: JointName) -> Option<&Joint> {
        self.joints.iter().find(|j| j.name == name)
    }

    /// Returns a copy with one joint replaced.
    pub fn with_joint(&self, joint: Joint) -> Result<Self> {
        let mut joints = self.joints.clone();
        match joints.iter_mut().find(|j| j.name == joint.name) {
            Some(slot) => *slot = joint,
            None => joints.push(joint),
        }
        Self::new(joints)
    }
}

/// One paired (or unpaired, when `target` is absent) try-on record.
#[derive(Debug, Clone, PartialEq)]
pub struct TryOnSample {
    pub sample_id: String,
    pub person: ImageTensor,
    pub garment: ImageTensor,
    pub mask: AgnosticMask,
    pub skeleton: SkeletonMap,
    pub flow_gt: Option<DenseFlow>,
    pub target: Option<ImageTensor>,
}

impl TryOnSample {
    pub fn is_paired(&self) -> bool {
        self.target.is_some()
    }

    /// Person image with the inpaint region blanked (set to 0 in signed range).
    pub fn masked_person(&self) -> ImageTensor {
        let signed = self.person.to_signed();
        let (h, w) = (signed.height(), signed.width());
        let arr = Array3::from_fn(signed.channels(), h, w, |c, y, x| {
            if self.mask.at(y, x) >= 0.5 {
                0.0
            } else {
                signed.array().get(c, y, x)
            }
        });
        ImageTensor::new_unchecked(arr, ValueRange::Signed)
    }
}

/// A single invariant violation reported by [`validate_sample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn check_image(name: &str, img: &ImageTensor, channels: usize, size: (usize, usize), out: &mut Vec<String>) {
    if img.channels() != channels {
        out.push(format!("{name} has {} channels, expected {channels}", img.channels()));
    }
    if (img.height(), img.width()) != size {
        out.push(format!(
            "{name} is {}x{}, expected {}x{}",
            img.height(),
            img.width(),
            size.0,
            size.1
        ));
    }
    let (lo, hi) = img.range().bounds();
    if img.data().iter().any(|v| !(*v >= lo && *v <= hi)) {
        out.push(format!("{name} has values outside its declared range"));
    }
}

/// Lists every invariant of `sample` that does not hold under `config`.
/// An empty list means the sample is well formed.
pub fn validate_sample(sample: &TryOnSample, config: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    let size = config.image_size;
    let f = config.codec_factor;

    if sample.sample_id.is_empty()
        || !sample
            .sample_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        out.push(format!("sample_id {:?} is not a safe file stem", sample.sample_id));
    }
    if size.0 < MIN_IMAGE_SIDE || size.1 < MIN_IMAGE_SIDE || size.0 % f != 0 || size.1 % f != 0 {
        out.push(format!("image size {}x{} incompatible with codec factor {f}", size.0, size.1));
    }
    check_image("person", &sample.person, 3, size, &mut out);
    check_image("garment", &sample.garment, 3, size, &mut out);
    if let Some(target) = &sample.target {
        check_image("target", target, 3, size, &mut out);
        if (target.height(), target.width()) != (sample.person.height(), sample.person.width()) {
            out.push("target and person dimensions differ".into());
        }
    }
    check_image("skeleton", sample.skeleton.image(), 3, size, &mut out);
    if sample.skeleton.image().range() != ValueRange::Unit {
        out.push("skeleton not in unit range".into());
    }

    let mask = &sample.mask;
    if (mask.height(), mask.width()) != size {
        out.push(format!("mask is {}x{}, expected {}x{}", mask.height(), mask.width(), size.0, size.1));
    }
    if !mask.is_binary() {
        out.push("mask not binary".into());
    } else if mask.foreground_fraction() < MIN_MASK_FOREGROUND {
        out.push("mask foreground below 1%".into());
    }

    if let Some(flow) = &sample.flow_gt {
        if (flow.height(), flow.width()) != (size.0 / f, size.1 / f) {
            out.push("flow_gt shape mismatch".into());
        }
        if flow
            .data()
            .iter()
            .any(|v| !(v.is_finite() && v.abs() <= MAX_FLOW_COMPONENT))
        {
            out.push("flow_gt has non-finite or out-of-bound displacements".into());
        }
    }
    out
}
