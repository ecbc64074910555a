//! Projection geometry: in-plane rotation, maximum intensity and ray-sum
//! projection, per-direction 1x2 filtration, linear backprojection and the
//! fine-tuning head that maps reconstructions to voxel probabilities.
//!
//! Rotation is about the `c` axis, so every projection of an `a x b x c`
//! volume is a `b x c` image. Backprojection is the exact transpose of
//! ray-sum projection, including the bilinear weights.

pub mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Shape, Tensor};
use kernels::RotationTaps;

/// Dense `a x b x c` grid, row-major with `c` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T = f32> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Scalar> Volume<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(
                "volume",
                &dims,
                "extents must be at least 1",
            ));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape("volume", &dims, &[data.len()]));
        }
        Ok(Volume { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: [usize; 3], v: T) -> Self {
        assert!(
            dims.iter().all(|&d| d > 0),
            "volume extents must be at least 1"
        );
        Volume {
            dims,
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.index(i, j, k)]
    }

    /// First voxel (linear index) that is negative or not finite.
    pub fn first_invalid_intensity(&self) -> Option<usize> {
        self.data
            .iter()
            .position(|&v| !v.is_finite() || v < T::zero())
    }

    /// Slice `i` along `a` as a `b x c` image.
    pub fn slice_a(&self, i: usize) -> Image<T> {
        let n = self.dims[1] * self.dims[2];
        Image {
            dims: [self.dims[1], self.dims[2]],
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn from_slices(slices: &[Image<T>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Config("cannot stack zero slices".into()))?;
        let [b, c] = first.dims;
        let mut data = Vec::with_capacity(slices.len() * b * c);
        for s in slices {
            if s.dims != first.dims {
                return Err(Error::shape("from_slices", &first.dims, &s.dims));
            }
            data.extend_from_slice(&s.data);
        }
        Volume::new([slices.len(), b, c], data)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(self.dims, self.data.clone()).expect("volume shape is consistent")
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Dense `b x c` image, row-major with `c` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T = f32> {
    dims: [usize; 2],
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(dims: [usize; 2], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid("image", &dims, "extents must be at least 1"));
        }
        if dims[0] * dims[1] != data.len() {
            return Err(Error::shape("image", &dims, &[data.len()]));
        }
        Ok(Image { dims, data })
    }

    pub fn filled(dims: [usize; 2], v: T) -> Self {
        Image {
            dims,
            data: vec![v; dims[0] * dims[1]],
        }
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, j: usize, k: usize) -> T {
        self.data[j * self.dims[1] + k]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(self.dims, self.data.clone()).expect("image shape is consistent")
    }
}

/// The uniform direction grid `{k * 180 / m : k = 0..m}` in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleSet {
    angles: Vec<f64>,
}

impl AngleSet {
    pub fn grid(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("angle grid needs m >= 1".into()));
        }
        Ok(AngleSet {
            angles: (0..m).map(|k| k as f64 * 180.0 / m as f64).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }
}

/// Images paired index-by-index with their projection angles.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack<T = f32> {
    angles: Vec<f64>,
    images: Vec<Image<T>>,
}

impl<T: Scalar> ProjectionStack<T> {
    pub fn new(angles: Vec<f64>, images: Vec<Image<T>>) -> Result<Self> {
        if angles.len() != images.len() {
            return Err(Error::shape(
                "projection stack",
                &[angles.len()],
                &[images.len()],
            ));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|im| im.dims != first.dims) {
                return Err(Error::shape("projection stack", &first.dims, &bad.dims));
            }
        }
        Ok(ProjectionStack { angles, images })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn images(&self) -> &[Image<T>] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Learnable 1x2 filters, one per projection direction.
#[derive(Debug, Clone, PartialEq)]
pub struct FiltrationBank<T = f32> {
    angles: Vec<f64>,
    filters: Vec<Tensor<T>>,
}

impl<T: Scalar> FiltrationBank<T> {
    /// Bank over `angles` with every filter at the identity `(1, 0)`.
    pub fn identity(angles: &[f64]) -> Self {
        FiltrationBank {
            angles: angles.to_vec(),
            filters: angles
                .iter()
                .map(|_| {
                    Tensor::from_vec([2], vec![T::one(), T::zero()])
                        .unwrap()
                        .requiring_grad()
                })
                .collect(),
        }
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Rebinds the bank to new directions, keeping filters by slot.
    pub fn set_angles(&mut self, angles: &[f64]) -> Result<()> {
        if angles.len() != self.filters.len() {
            return Err(Error::Config(alloc::format!(
                "bank holds {} filters but {} angles were given",
                self.filters.len(),
                angles.len()
            )));
        }
        self.angles = angles.to_vec();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn filters(&self) -> &[Tensor<T>] {
        &self.filters
    }

    pub fn filters_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.filters
    }

    /// Resets every filter to `(1, 0)`.
    pub fn reset_identity(&mut self) {
        for f in &mut self.filters {
            f.values_mut().copy_from_slice(&[T::one(), T::zero()]);
        }
    }
}

/// Volume rotated by `alpha` degrees in the (a, b) plane about the grid
/// centre, bilinear in-plane, zero outside the source grid.
pub fn rotate_volume<T: Scalar>(vol: &Volume<T>, alpha: f64) -> Volume<T> {
    let [a, b, _] = vol.dims;
    let taps = RotationTaps::new(a, b, alpha);
    Volume {
        dims: vol.dims,
        data: kernels::rotate(&vol.data, vol.dims, &taps),
    }
}

/// Maximum intensity projection along `a` after rotation by `alpha`.
pub fn mip_project<T: Scalar>(vol: &Volume<T>, alpha: f64) -> Image<T> {
    let [a, b, c] = vol.dims;
    let taps = RotationTaps::new(a, b, alpha);
    let (img, _) = kernels::mip_forward(&vol.data, vol.dims, &taps);
    Image {
        dims: [b, c],
        data: img,
    }
}

/// Ray-sum projection along `a` after rotation by `alpha`.
pub fn sum_project<T: Scalar>(vol: &Volume<T>, alpha: f64) -> Image<T> {
    let [a, b, c] = vol.dims;
    let taps = RotationTaps::new(a, b, alpha);
    let mut img = vec![T::zero(); b * c];
    kernels::sum_project_add(&vol.data, vol.dims, &taps, &mut img);
    Image {
        dims: [b, c],
        data: img,
    }
}

fn check_bank<T: Scalar>(stack_angles: &[f64], bank: &FiltrationBank<T>) -> Result<()> {
    if stack_angles != bank.angles.as_slice() {
        return Err(Error::Config(alloc::format!(
            "filtration bank angles {:?} do not match stack angles {:?}",
            bank.angles,
            stack_angles
        )));
    }
    Ok(())
}

/// Applies each direction's 1x2 filter along `b` to its image.
pub fn filtrate<T: Scalar>(
    stack: &ProjectionStack<T>,
    bank: &FiltrationBank<T>,
) -> Result<ProjectionStack<T>> {
    check_bank(&stack.angles, bank)?;
    let images = stack
        .images
        .iter()
        .zip(&bank.filters)
        .map(|(im, f)| {
            let w = f.values();
            Image {
                dims: im.dims,
                data: kernels::filter1x2_forward(&im.data, im.dims[0], im.dims[1], w[0], w[1]),
            }
        })
        .collect();
    Ok(ProjectionStack {
        angles: stack.angles.clone(),
        images,
    })
}

/// Sum over directions of each image smeared back along its rays.
pub fn backproject<T: Scalar>(stack: &ProjectionStack<T>, dims: [usize; 3]) -> Result<Volume<T>> {
    let [_, b, c] = dims;
    if dims.contains(&0) {
        return Err(Error::invalid(
            "backproject",
            &dims,
            "extents must be at least 1",
        ));
    }
    for im in &stack.images {
        if im.dims != [b, c] {
            return Err(Error::shape("backproject", &im.dims, &[b, c]));
        }
    }
    let imgs: Vec<&[T]> = stack.images.iter().map(|im| im.data.as_slice()).collect();
    let vol = backproject_sum(&imgs, &stack.angles, dims);
    Ok(Volume { dims, data: vol })
}

/// Sum over directions of per-direction smears. Each direction gets its own
/// buffer and the buffers are added in angle order, so fan-out does not
/// change the result.
pub(crate) fn backproject_sum<T: Scalar>(
    images: &[&[T]],
    angles: &[f64],
    dims: [usize; 3],
) -> Vec<T> {
    let [a, b, c] = dims;
    let jobs: Vec<(&[T], f64)> = images.iter().copied().zip(angles.iter().copied()).collect();
    let parts = par::map(&jobs, |&(img, angle)| {
        let taps = RotationTaps::new(a, b, angle);
        let mut v = vec![T::zero(); a * b * c];
        kernels::backproject_add(img, dims, &taps, &mut v);
        v
    });
    let mut vol = vec![T::zero(); a * b * c];
    for p in parts {
        for (d, s) in vol.iter_mut().zip(p) {
            *d += s;
        }
    }
    vol
}

/// Pre-activation of [`finetune_head`].
pub fn head_logits<T: Scalar>(vol: &Volume<T>, gain: T, shift: T) -> Volume<T> {
    let pooled = crate::autodiff::avgpool3d_same_values(&vol.data, vol.dims);
    Volume {
        dims: vol.dims,
        data: pooled.into_iter().map(|v| gain * v + shift).collect(),
    }
}

/// `sigmoid(gain * avgpool3d_same(vol) + shift)`.
pub fn finetune_head<T: Scalar>(vol: &Volume<T>, gain: T, shift: T) -> Volume<T> {
    head_logits(vol, gain, shift).map(crate::autodiff::sigmoid)
}

fn vol_dims(op: &'static str, d: &[usize]) -> Result<[usize; 3]> {
    if d.len() != 3 || d.contains(&0) {
        return Err(Error::invalid(op, d, "expected a volume [a,b,c]"));
    }
    Ok([d[0], d[1], d[2]])
}

impl<T: Scalar> Graph<T> {
    /// Differentiable [`mip_project`]; the output is a `[b, c]` image.
    pub fn mip_project(&mut self, volume: Var, angle: f64) -> Result<Var> {
        let dims = vol_dims("mip_project", self.shape(volume))?;
        let taps = RotationTaps::new(dims[0], dims[1], angle);
        let (img, argmax) = kernels::mip_forward(self.value(volume), dims, &taps);
        let rg = self.requires_grad(volume);
        Ok(self.record(
            Shape::from([dims[1], dims[2]]),
            img,
            Op::Mip {
                volume,
                angle,
                argmax,
            },
            rg,
        ))
    }

    /// Differentiable [`sum_project`].
    pub fn sum_project(&mut self, volume: Var, angle: f64) -> Result<Var> {
        let dims = vol_dims("sum_project", self.shape(volume))?;
        let taps = RotationTaps::new(dims[0], dims[1], angle);
        let mut img = vec![T::zero(); dims[1] * dims[2]];
        kernels::sum_project_add(self.value(volume), dims, &taps, &mut img);
        let rg = self.requires_grad(volume);
        Ok(self.record(
            Shape::from([dims[1], dims[2]]),
            img,
            Op::SumProject { volume, angle },
            rg,
        ))
    }

    /// 1x2 filter along the first image axis with zero padding at the end.
    pub fn filter1x2(&mut self, image: Var, filter: Var) -> Result<Var> {
        let d = self.shape(image).to_vec();
        if d.len() != 2 {
            return Err(Error::invalid("filter1x2", &d, "expected an image [b,c]"));
        }
        if self.shape(filter) != [2] {
            return Err(Error::shape("filter1x2", self.shape(filter), &[2]));
        }
        let w = self.value(filter);
        let out = kernels::filter1x2_forward(self.value(image), d[0], d[1], w[0], w[1]);
        let rg = self.requires_grad(image) || self.requires_grad(filter);
        Ok(self.record(
            Shape::from([d[0], d[1]]),
            out,
            Op::Filter1x2 { image, filter },
            rg,
        ))
    }

    /// Differentiable [`backproject`] of `images[i]` along `angles[i]`.
    pub fn backproject(&mut self, images: &[Var], angles: &[f64], dims: [usize; 3]) -> Result<Var> {
        if images.len() != angles.len() {
            return Err(Error::shape(
                "backproject",
                &[images.len()],
                &[angles.len()],
            ));
        }
        vol_dims("backproject", &dims)?;
        let [_, b, c] = dims;
        for &im in images {
            if self.shape(im) != [b, c] {
                return Err(Error::shape("backproject", self.shape(im), &[b, c]));
            }
        }
        let imgs: Vec<&[T]> = images.iter().map(|&im| self.value(im)).collect();
        let vol = backproject_sum(&imgs, angles, dims);
        let rg = images.iter().any(|&im| self.requires_grad(im));
        Ok(self.record(
            Shape::from(dims),
            vol,
            Op::Backproject {
                images: images.to_vec(),
                angles: angles.to_vec(),
            },
            rg,
        ))
    }

    /// Pre-activation of the fine-tuning head: `gain * avgpool3d_same(vol) + shift`.
    pub fn head_logits(&mut self, vol: Var, gain: Var, shift: Var) -> Result<Var> {
        let pooled = self.avgpool3d_same(vol)?;
        self.affine(pooled, gain, shift)
    }

    /// Fine-tuning head, `sigmoid(head_logits)`.
    pub fn finetune_head(&mut self, vol: Var, gain: Var, shift: Var) -> Result<Var> {
        let z = self.head_logits(vol, gain, shift)?;
        Ok(self.sigmoid(z))
    }
}
