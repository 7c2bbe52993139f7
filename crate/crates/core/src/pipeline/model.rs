use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::como_vit::{crop, reflect_pad, AblationVariant, BlockConfig, ComoVitBlock, Decoder};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, SpatialAttentionMap};
use crate::gamma::{apply_gamma_taylor, Ggcm, GlobalGamma, Lgcm, LocalGammaMap};
use crate::nn::{hwc_dims, DropPath};
use crate::tensor::{ParamStore, Real, Tensor};

/// Which gamma modules are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GammaVariant {
    /// No global gamma: `R_s1 = I`.
    G1,
    /// No local gamma: `R_s3 = R_s2`.
    G2,
    /// Both modules.
    G3,
}

impl GammaVariant {
    pub const ALL: [GammaVariant; 3] = [Self::G1, Self::G2, Self::G3];

    pub fn describe(self) -> &'static str {
        match self {
            Self::G1 => "without GGCM",
            Self::G2 => "without LGCM",
            Self::G3 => "GGCM + LGCM",
        }
    }
}

impl fmt::Display for GammaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for GammaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "G1" => Ok(Self::G1),
            "G2" => Ok(Self::G2),
            "G3" => Ok(Self::G3),
            _ => Err(Error::Config(format!("unknown gamma variant `{s}` (expected G1, G2 or G3)"))),
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IagcConfig {
    pub embed_dim: usize,
    pub heads: usize,
    /// Number of stacked blocks `L`.
    pub depth: usize,
    pub window_size: usize,
    pub taylor_order: usize,
    /// Window-token width; 0 means `4 · embed_dim`.
    pub global_dim: usize,
    pub mlp_ratio: usize,
    /// Training crop side, used to size the window-position table.
    pub crop_size: usize,
    pub attention: AblationVariant,
    pub gamma: GammaVariant,
    pub floor: f64,
}

impl Default for IagcConfig {
    fn default() -> Self {
        IagcConfig {
            embed_dim: 15,
            heads: 5,
            depth: 2,
            window_size: 16,
            taylor_order: 2,
            global_dim: 0,
            mlp_ratio: 4,
            crop_size: 64,
            attention: AblationVariant::A4,
            gamma: GammaVariant::G3,
            floor: crate::gamma::DEFAULT_FLOOR,
        }
    }
}

impl IagcConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("depth", self.depth),
            ("window_size", self.window_size),
            ("taylor_order", self.taylor_order),
            ("mlp_ratio", self.mlp_ratio),
            ("crop_size", self.crop_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide embed_dim ({})",
                self.heads, self.embed_dim
            )));
        }
        if !self.resolved_global_dim().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide global_dim ({})",
                self.heads,
                self.resolved_global_dim()
            )));
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(Error::Config(format!("floor must be in (0, 1), got {}", self.floor)));
        }
        Ok(())
    }

    pub fn resolved_global_dim(&self) -> usize {
        if self.global_dim == 0 {
            4 * self.embed_dim
        } else {
            self.global_dim
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        let mut b = BlockConfig::new(
            self.embed_dim,
            self.heads,
            self.window_size,
            self.crop_size.div_ceil(self.window_size),
        );
        b.global_dim = self.resolved_global_dim();
        b.mlp_ratio = self.mlp_ratio;
        b
    }
}

/// All stage results of one forward pass.
#[derive(Clone, Debug)]
pub struct StageOutputs<T: Real = f32> {
    pub r_s1: Tensor<T>,
    pub r_s2: Tensor<T>,
    pub r_s3: Tensor<T>,
    pub gamma_g: Option<GlobalGamma<T>>,
    pub gamma_l: Option<LocalGammaMap<T>>,
    pub attn_input: SpatialAttentionMap<T>,
    pub attn_stage1: SpatialAttentionMap<T>,
    /// Local attention weights of each block, when computed.
    pub local_attention: Vec<Option<Tensor<T>>>,
    pub global_attention: Vec<Option<Tensor<T>>>,
}

impl<T: Real> StageOutputs<T> {
    pub fn stages(&self) -> [&Tensor<T>; 3] {
        [&self.r_s1, &self.r_s2, &self.r_s3]
    }
}

/// The three-stage enhancement network. Parameters live in a separate
/// [`ParamStore`] so the same model can run at either precision.
#[derive(Clone, Debug)]
pub struct IagcModel {
    pub config: IagcConfig,
    pub ggcm: Option<Ggcm>,
    pub fusion: Fusion,
    pub blocks: Vec<ComoVitBlock>,
    pub decoder: Decoder,
    pub lgcm: Option<Lgcm>,
}

impl IagcModel {
    /// Build the model and register freshly initialized parameters.
    pub fn new<T: Real>(config: IagcConfig, ps: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.embed_dim;
        let ggcm = match config.gamma {
            GammaVariant::G1 => None,
            _ => Some(Ggcm::new(ps, "ggcm", c, &mut rng)?),
        };
        let fusion = Fusion::new(ps, "fusion", c, &mut rng)?;
        let bc = config.block_config();
        let blocks = (0..config.depth)
            .map(|l| ComoVitBlock::new(ps, &format!("block{l}"), bc.clone(), config.attention, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(ps, "decoder", c, &mut rng)?;
        let lgcm = match config.gamma {
            GammaVariant::G2 => None,
            _ => Some(Lgcm::new(ps, "lgcm", c, &mut rng)?),
        };
        Ok(IagcModel {
            config,
            ggcm,
            fusion,
            blocks,
            decoder,
            lgcm,
        })
    }

    /// Rebuild the structure for `config` and check that `ps` holds exactly
    /// the expected parameters with matching shapes.
    pub fn bind<T: Real>(config: IagcConfig, ps: &ParamStore<T>) -> Result<Self> {
        let mut fresh = ParamStore::<T>::new();
        let model = Self::new(config, &mut fresh, 0)?;
        if fresh.len() != ps.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, configuration expects {}",
                ps.len(),
                fresh.len()
            )));
        }
        for ((_, name, t), (_, en, et)) in ps.iter().zip(fresh.iter()) {
            if name != en || t.shape() != et.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` {:?} does not match expected `{en}` {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
        }
        Ok(model)
    }

    /// Forward pass; `drop` selects training (stochastic depth) or inference.
    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        image: &Tensor<T>,
        drop: &mut DropPath,
    ) -> Result<StageOutputs<T>> {
        let [h, w, c] = hwc_dims(image, "iagc_forward")?;
        if c != 3 {
            return Err(Error::shape("iagc_forward", format!("expected 3 channels, got {c}")));
        }
        let cfg = &self.config;
        let (r_s1, gamma_g) = match &self.ggcm {
            Some(g) => {
                let gamma = g.predict(ps, image)?;
                (apply_gamma_taylor(image, &gamma.value, cfg.taylor_order, cfg.floor)?, Some(gamma))
            }
            None => (image.clone(), None),
        };
        let fused = self.fusion.forward(ps, image, &r_s1)?;
        let ws = cfg.window_size;
        let (ph, pw) = ((ws - h % ws) % ws, (ws - w % ws) % ws);
        let mut f = reflect_pad(&fused.fused.tensor, ph, pw)?;
        let mut local_attention = Vec::with_capacity(self.blocks.len());
        let mut global_attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(ps, &f, drop)?;
            f = out.features;
            local_attention.push(out.local_attention);
            global_attention.push(out.global_attention);
        }
        let r_s2 = crop(&self.decoder.decode(ps, &f)?, h, w)?;
        let (r_s3, gamma_l) = match &self.lgcm {
            Some(l) => {
                let map = l.predict(ps, &r_s2)?;
                (apply_gamma_taylor(&r_s2, &map.map, cfg.taylor_order, cfg.floor)?, Some(map))
            }
            None => (r_s2.clone(), None),
        };
        Ok(StageOutputs {
            r_s1,
            r_s2,
            r_s3,
            gamma_g,
            gamma_l,
            attn_input: fused.attn_input,
            attn_stage1: fused.attn_stage1,
            local_attention,
            global_attention,
        })
    }

    /// Deterministic inference.
    pub fn infer<T: Real>(&self, ps: &ParamStore<T>, image: &Tensor<T>) -> Result<StageOutputs<T>> {
        self.forward(ps, image, &mut DropPath::eval())
    }
}

/// Free-function form of [`IagcModel::forward`].
pub fn iagc_forward<T: Real>(
    image: &Tensor<T>,
    model: &IagcModel,
    ps: &ParamStore<T>,
    drop: &mut DropPath,
) -> Result<StageOutputs<T>> {
    model.forward(ps, image, drop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gamma::{apply_gamma_taylor, DEFAULT_FLOOR};
    use crate::tensor::Init;

    fn small() -> IagcConfig {
        IagcConfig {
            embed_dim: 4,
            heads: 2,
            depth: 1,
            window_size: 4,
            crop_size: 8,
            ..IagcConfig::default()
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor::create(&[h, w, 3], Init::Uniform { lo: 0.0, hi: 0.5, seed }).unwrap()
    }

    #[test]
    fn shapes_and_determinism() {
        let mut ps = ParamStore::<f64>::new();
        let model = IagcModel::new(small(), &mut ps, 1).unwrap();
        for (h, w) in [(8, 8), (7, 10)] {
            let img = image(h, w, 2);
            let a = model.infer(&ps, &img).unwrap();
            let b = model.infer(&ps, &img).unwrap();
            for (x, y) in a.stages().iter().zip(b.stages()) {
                assert_eq!(x.shape(), &[h, w, 3]);
                assert_eq!(x.data(), y.data());
            }
        }
    }

    #[test]
    fn half_gamma_gives_closed_form_stage1() {
        let mut ps = ParamStore::<f64>::new();
        let model = IagcModel::new(small(), &mut ps, 3).unwrap();
        let g = model.ggcm.clone().unwrap();
        for id in [g.conv.weight, g.conv.bias, g.fc.weight, g.fc.bias.unwrap()] {
            let n = ps.get(id).numel();
            ps.set_data(id, vec![0.0; n]).unwrap();
        }
        let img = image(8, 8, 4);
        let out = model.infer(&ps, &img).unwrap();
        assert_eq!(out.gamma_g.as_ref().unwrap().get(), 0.5);
        for (&r, &i) in out.r_s1.data().iter().zip(img.data()) {
            let x = 0.5 * i.max(DEFAULT_FLOOR).ln();
            assert!((r - (1.0 + x + 0.5 * x * x)).abs() < 1e-12);
        }
        let direct = apply_gamma_taylor(&img, &Tensor::scalar(0.5), 2, DEFAULT_FLOOR).unwrap();
        assert_eq!(direct.data(), out.r_s1.data());
    }

    #[test]
    fn gamma_variants_skip_modules() {
        let img = image(8, 8, 5);
        let mut ps = ParamStore::<f64>::new();
        let g1 = IagcModel::new(IagcConfig { gamma: GammaVariant::G1, ..small() }, &mut ps, 1).unwrap();
        let out = g1.infer(&ps, &img).unwrap();
        assert_eq!(out.r_s1.data(), img.data());
        assert!(out.gamma_g.is_none());
        let mut ps = ParamStore::<f64>::new();
        let g2 = IagcModel::new(IagcConfig { gamma: GammaVariant::G2, ..small() }, &mut ps, 1).unwrap();
        let out = g2.infer(&ps, &img).unwrap();
        assert_eq!(out.r_s3.data(), out.r_s2.data());
        assert!(ps.iter().all(|(_, n, _)| !n.starts_with("lgcm")));
    }

    #[test]
    fn bind_checks_parameter_layout() {
        let mut ps = ParamStore::<f32>::new();
        IagcModel::new(small(), &mut ps, 1).unwrap();
        assert!(IagcModel::bind(small(), &ps).is_ok());
        let other = IagcConfig { depth: 2, ..small() };
        assert!(matches!(IagcModel::bind(other, &ps), Err(Error::Format(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut ps = ParamStore::<f32>::new();
        let bad = IagcConfig { heads: 4, ..IagcConfig::default() };
        assert!(matches!(IagcModel::new(bad, &mut ps, 0), Err(Error::Config(_))));
        assert_eq!(IagcConfig::default().block_config().global_dim, 60);
        assert_eq!(IagcConfig::default().block_config().pos_grid, 4);
    }
}
