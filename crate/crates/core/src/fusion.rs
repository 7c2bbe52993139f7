//! Feature projection of the input and stage-1 images, spatial attention
//! weighting, and fusion into the encoder input.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{hwc_dims, Conv};
use crate::tensor::{ParamStore, Real, Tensor};

/// Single-channel spatial attention `[H, W, 1]` with entries in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct SpatialAttentionMap<T: Real = f32> {
    pub map: Tensor<T>,
}

/// Fused encoder input `[H, W, c]`.
#[derive(Clone, Debug)]
pub struct FusedFeature<T: Real = f32> {
    pub tensor: Tensor<T>,
}

/// `A = sigmoid(Conv(F))`, `F̂ = A ⊙ F` with `A` broadcast over channels.
#[derive(Clone, Debug)]
pub struct Sam {
    pub conv: Conv,
}

impl Sam {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Sam {
            conv: Conv::new(ps, &format!("{name}.conv"), channels, 1, 3, rng)?,
        })
    }

    pub fn attend<T: Real>(
        &self,
        ps: &ParamStore<T>,
        f: &Tensor<T>,
    ) -> Result<(SpatialAttentionMap<T>, Tensor<T>)> {
        let map = self.conv.forward(ps, f)?.sigmoid();
        let weighted = f.mul(&map)?;
        Ok((SpatialAttentionMap { map }, weighted))
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput<T: Real = f32> {
    pub fused: FusedFeature<T>,
    pub attn_input: SpatialAttentionMap<T>,
    pub attn_stage1: SpatialAttentionMap<T>,
}

/// Projection, attention and fusion of `(I, R_s1)`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub proj_input: Conv,
    pub proj_stage1: Conv,
    pub sam_input: Sam,
    pub sam_stage1: Sam,
    pub fuse: Conv,
    pub channels: usize,
}

impl Fusion {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Fusion {
            proj_input: Conv::new(ps, &format!("{name}.proj_input"), 3, channels, 3, rng)?,
            proj_stage1: Conv::new(ps, &format!("{name}.proj_stage1"), 3, channels, 3, rng)?,
            sam_input: Sam::new(ps, &format!("{name}.sam_input"), channels, rng)?,
            sam_stage1: Sam::new(ps, &format!("{name}.sam_stage1"), channels, rng)?,
            fuse: Conv::new(ps, &format!("{name}.fuse"), channels, channels, 3, rng)?,
            channels,
        })
    }

    /// `(F_I, F_R) = (Conv_I(I), Conv_R(R_s1))`.
    pub fn project_features<T: Real>(
        &self,
        ps: &ParamStore<T>,
        input: &Tensor<T>,
        stage1: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let a = hwc_dims(input, "project_features")?;
        let b = hwc_dims(stage1, "project_features")?;
        if a != b {
            return Err(Error::shape(
                "project_features",
                format!("input {a:?} and stage-1 image {b:?} differ"),
            ));
        }
        Ok((
            self.proj_input.forward(ps, input)?,
            self.proj_stage1.forward(ps, stage1)?,
        ))
    }

    /// `Conv(F̂_I + F̂_R)`.
    pub fn fuse<T: Real>(
        &self,
        ps: &ParamStore<T>,
        weighted_input: &Tensor<T>,
        weighted_stage1: &Tensor<T>,
    ) -> Result<FusedFeature<T>> {
        if weighted_input.shape() != weighted_stage1.shape() {
            return Err(Error::shape(
                "fuse",
                format!("{:?} vs {:?}", weighted_input.shape(), weighted_stage1.shape()),
            ));
        }
        let tensor = self.fuse.forward(ps, &weighted_input.add(weighted_stage1)?)?;
        Ok(FusedFeature { tensor })
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        input: &Tensor<T>,
        stage1: &Tensor<T>,
    ) -> Result<FusionOutput<T>> {
        let (fi, fr) = self.project_features(ps, input, stage1)?;
        let (attn_input, wi) = self.sam_input.attend(ps, &fi)?;
        let (attn_stage1, wr) = self.sam_stage1.attend(ps, &fr)?;
        Ok(FusionOutput {
            fused: self.fuse(ps, &wi, &wr)?,
            attn_input,
            attn_stage1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, GradCheckOptions, Init};
    use rand::SeedableRng;

    fn setup(seed: u64) -> (ParamStore<f64>, Fusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let f = Fusion::new(&mut ps, "fusion", 15, &mut rng).unwrap();
        (ps, f)
    }

    fn zero(ps: &mut ParamStore<f64>, conv: &Conv) {
        for id in [conv.weight, conv.bias] {
            let n = ps.get(id).numel();
            ps.set_data(id, vec![0.0; n]).unwrap();
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor::create(&[h, w, 3], Init::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn projection_shapes_and_zero_weights() {
        let (mut ps, f) = setup(1);
        let (i, r) = (image(6, 5, 1), image(6, 5, 2));
        let (fi, fr) = f.project_features(&ps, &i, &r).unwrap();
        assert_eq!(fi.shape(), &[6, 5, 15]);
        assert_ne!(fi.data(), fr.data());
        zero(&mut ps, &f.proj_input);
        let (fi, _) = f.project_features(&ps, &i, &r).unwrap();
        assert!(fi.data().iter().all(|&v| v == 0.0));
        assert!(f.project_features(&ps, &i, &image(6, 4, 3)).is_err());
    }

    #[test]
    fn zero_attention_conv_halves_features() {
        let (mut ps, f) = setup(2);
        zero(&mut ps, &f.sam_input.conv);
        let feat = Tensor::create(&[4, 4, 15], Init::Normal { mean: 0.0, std: 1.0, seed: 3 }).unwrap();
        let (a, w) = f.sam_input.attend(&ps, &feat).unwrap();
        assert_eq!(a.map.shape(), &[4, 4, 1]);
        assert!(a.map.data().iter().all(|&v| v == 0.5));
        for (x, y) in feat.data().iter().zip(w.data()) {
            assert_eq!(x * 0.5, *y);
        }
    }

    #[test]
    fn attention_in_open_unit_interval_and_zero_features_stay_zero() {
        for seed in 0..20 {
            let (ps, f) = setup(seed);
            let feat = Tensor::create(&[5, 5, 15], Init::Normal { mean: 0.0, std: 2.0, seed }).unwrap();
            let (a, _) = f.sam_stage1.attend(&ps, &feat).unwrap();
            assert!(a.map.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let zeros = Tensor::create(&[5, 5, 15], Init::Zero).unwrap();
            let (_, w) = f.sam_stage1.attend(&ps, &zeros).unwrap();
            assert!(w.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fuse_is_symmetric_and_zero_gives_bias() {
        let (ps, f) = setup(3);
        let x = Tensor::create(&[4, 3, 15], Init::Normal { mean: 0.0, std: 1.0, seed: 8 }).unwrap();
        let z = Tensor::create(&[4, 3, 15], Init::Zero).unwrap();
        let a = f.fuse(&ps, &x, &z).unwrap().tensor;
        let b = f.fuse(&ps, &z, &x).unwrap().tensor;
        assert_eq!(a.data(), b.data());
        let zz = f.fuse(&ps, &z, &z).unwrap().tensor;
        let bias = ps.get(f.fuse.bias).data().to_vec();
        for px in zz.data().chunks(15) {
            assert_eq!(px, &bias[..]);
        }
    }

    #[test]
    fn chain_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::<f64>::new();
        let f = Fusion::new(&mut ps, "fusion", 4, &mut rng).unwrap();
        let (i, r) = (image(4, 4, 6), image(4, 4, 7));
        let report = gradient_check(
            |p| Ok(f.forward(p, &i, &r)?.fused.tensor.sum()),
            &mut ps,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
