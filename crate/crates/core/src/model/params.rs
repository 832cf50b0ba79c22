use std::convert::Infallible;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::model::ArchConfig;
use crate::numerics::init::{truncated_normal, xavier_uniform};
use crate::numerics::DenseArray;

/// Weights of one pre-LN transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub norm1_scale: T,
    pub norm1_shift: T,
    /// Fused query/key/value projection, `D × 3D`.
    pub qkv_weight: T,
    pub qkv_bias: T,
    pub proj_weight: T,
    pub proj_bias: T,
    pub norm2_scale: T,
    pub norm2_shift: T,
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
}

/// Learned encoder-to-decoder width change.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub weight: T,
    pub bias: T,
}

/// Every learnable array of the network.
///
/// Generic over the stored value so the same layout serves raw arrays,
/// tape variables, shapes and optimizer slots. Traversal order is fixed and
/// shared by [`ModelParams::try_map`], [`ModelParams::into_vec`] and
/// [`ModelParams::values_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embed_weight: T,
    pub embed_bias: T,
    /// `1 × V × C_e`
    pub enc_pos_spatial: T,
    /// `T_e × 1 × C_e`
    pub enc_pos_temporal: T,
    pub encoder: Vec<BlockParams<T>>,
    pub enc_norm_scale: T,
    pub enc_norm_shift: T,
    /// Absent when encoder and decoder widths agree.
    pub projection: Option<Projection<T>>,
    pub mask_token: T,
    pub dec_pos_spatial: T,
    pub dec_pos_temporal: T,
    pub decoder: Vec<BlockParams<T>>,
    pub dec_norm_scale: T,
    pub dec_norm_shift: T,
    pub head_weight: T,
    pub head_bias: T,
}

impl<T> BlockParams<T> {
    fn try_map<'a, U, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a T) -> Result<U, E>,
    ) -> Result<BlockParams<U>, E> {
        let mut g = |name: &str, t: &'a T| f(&format!("{prefix}.{name}"), t);
        Ok(BlockParams {
            norm1_scale: g("norm1_scale", &self.norm1_scale)?,
            norm1_shift: g("norm1_shift", &self.norm1_shift)?,
            qkv_weight: g("qkv_weight", &self.qkv_weight)?,
            qkv_bias: g("qkv_bias", &self.qkv_bias)?,
            proj_weight: g("proj_weight", &self.proj_weight)?,
            proj_bias: g("proj_bias", &self.proj_bias)?,
            norm2_scale: g("norm2_scale", &self.norm2_scale)?,
            norm2_shift: g("norm2_shift", &self.norm2_shift)?,
            fc1_weight: g("fc1_weight", &self.fc1_weight)?,
            fc1_bias: g("fc1_bias", &self.fc1_bias)?,
            fc2_weight: g("fc2_weight", &self.fc2_weight)?,
            fc2_bias: g("fc2_bias", &self.fc2_bias)?,
        })
    }

    fn push_into(self, out: &mut Vec<T>) {
        out.extend([
            self.norm1_scale,
            self.norm1_shift,
            self.qkv_weight,
            self.qkv_bias,
            self.proj_weight,
            self.proj_bias,
            self.norm2_scale,
            self.norm2_shift,
            self.fc1_weight,
            self.fc1_bias,
            self.fc2_weight,
            self.fc2_bias,
        ]);
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([
            &mut self.norm1_scale,
            &mut self.norm1_shift,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.norm2_scale,
            &mut self.norm2_shift,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]);
    }
}

impl<T> ModelParams<T> {
    /// Applies `f` to every array with its dotted name, in traversal order.
    pub fn try_map<'a, U, E>(&'a self, mut f: impl FnMut(&str, &'a T) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        Ok(ModelParams {
            embed_weight: f("embed_weight", &self.embed_weight)?,
            embed_bias: f("embed_bias", &self.embed_bias)?,
            enc_pos_spatial: f("enc_pos_spatial", &self.enc_pos_spatial)?,
            enc_pos_temporal: f("enc_pos_temporal", &self.enc_pos_temporal)?,
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("encoder.{i}"), &mut f))
                .collect::<Result<_, E>>()?,
            enc_norm_scale: f("enc_norm_scale", &self.enc_norm_scale)?,
            enc_norm_shift: f("enc_norm_shift", &self.enc_norm_shift)?,
            projection: match &self.projection {
                Some(p) => Some(Projection {
                    weight: f("projection.weight", &p.weight)?,
                    bias: f("projection.bias", &p.bias)?,
                }),
                None => None,
            },
            mask_token: f("mask_token", &self.mask_token)?,
            dec_pos_spatial: f("dec_pos_spatial", &self.dec_pos_spatial)?,
            dec_pos_temporal: f("dec_pos_temporal", &self.dec_pos_temporal)?,
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("decoder.{i}"), &mut f))
                .collect::<Result<_, E>>()?,
            dec_norm_scale: f("dec_norm_scale", &self.dec_norm_scale)?,
            dec_norm_shift: f("dec_norm_shift", &self.dec_norm_shift)?,
            head_weight: f("head_weight", &self.head_weight)?,
            head_bias: f("head_bias", &self.head_bias)?,
        })
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> ModelParams<U> {
        match self.try_map(|n, t| Ok::<_, Infallible>(f(n, t))) {
            Ok(p) => p,
            Err(never) => match never {},
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.map(|n, _| n.to_string()).into_vec()
    }

    pub fn into_vec(self) -> Vec<T> {
        let mut out = vec![self.embed_weight, self.embed_bias, self.enc_pos_spatial, self.enc_pos_temporal];
        for b in self.encoder {
            b.push_into(&mut out);
        }
        out.extend([self.enc_norm_scale, self.enc_norm_shift]);
        if let Some(p) = self.projection {
            out.extend([p.weight, p.bias]);
        }
        out.extend([self.mask_token, self.dec_pos_spatial, self.dec_pos_temporal]);
        for b in self.decoder {
            b.push_into(&mut out);
        }
        out.extend([self.dec_norm_scale, self.dec_norm_shift, self.head_weight, self.head_bias]);
        out
    }

    pub fn values(&self) -> Vec<&T> {
        self.map(|_, t| t).into_vec()
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.embed_weight,
            &mut self.embed_bias,
            &mut self.enc_pos_spatial,
            &mut self.enc_pos_temporal,
        ];
        for b in &mut self.encoder {
            b.push_mut(&mut out);
        }
        out.extend([&mut self.enc_norm_scale, &mut self.enc_norm_shift]);
        if let Some(p) = &mut self.projection {
            out.extend([&mut p.weight, &mut p.bias]);
        }
        out.extend([&mut self.mask_token, &mut self.dec_pos_spatial, &mut self.dec_pos_temporal]);
        for b in &mut self.decoder {
            b.push_mut(&mut out);
        }
        out.extend([
            &mut self.dec_norm_scale,
            &mut self.dec_norm_shift,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        out
    }

    /// Rebuilds a container with this layout from values in traversal order.
    pub fn zip_values<U>(&self, values: Vec<U>) -> Option<ModelParams<U>> {
        let mut it = values.into_iter();
        let out = self.try_map(|_, _| it.next().ok_or(())).ok()?;
        it.next().is_none().then_some(out)
    }
}

impl ModelParams<DenseArray> {
    pub fn num_scalars(&self) -> usize {
        self.values().iter().map(|a| a.len()).sum()
    }

    /// SHA-256 over every name, shape and element bit pattern.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.map(|name, a| {
            h.update(name.as_bytes());
            for &d in a.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(a.to_le_bytes());
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|a| a.is_finite())
    }
}

fn block_shapes(d: usize, hidden: usize) -> BlockParams<Vec<usize>> {
    BlockParams {
        norm1_scale: vec![d],
        norm1_shift: vec![d],
        qkv_weight: vec![d, 3 * d],
        qkv_bias: vec![3 * d],
        proj_weight: vec![d, d],
        proj_bias: vec![d],
        norm2_scale: vec![d],
        norm2_shift: vec![d],
        fc1_weight: vec![d, hidden],
        fc1_bias: vec![hidden],
        fc2_weight: vec![hidden, d],
        fc2_bias: vec![d],
    }
}

/// Array shapes implied by `arch`.
pub fn param_shapes(arch: &ArchConfig) -> ModelParams<Vec<usize>> {
    let (e, d) = (arch.embed_dim, arch.decoder_dim);
    let (t, v) = (arch.segments(), arch.joints);
    ModelParams {
        embed_weight: vec![arch.token_dim(), e],
        embed_bias: vec![e],
        enc_pos_spatial: vec![1, v, e],
        enc_pos_temporal: vec![t, 1, e],
        encoder: (0..arch.encoder_depth).map(|_| block_shapes(e, arch.mlp_dim)).collect(),
        enc_norm_scale: vec![e],
        enc_norm_shift: vec![e],
        projection: (e != d).then(|| Projection {
            weight: vec![e, d],
            bias: vec![d],
        }),
        mask_token: vec![d],
        dec_pos_spatial: vec![1, v, d],
        dec_pos_temporal: vec![t, 1, d],
        decoder: (0..arch.decoder_depth)
            .map(|_| block_shapes(d, arch.decoder_mlp_dim()))
            .collect(),
        dec_norm_scale: vec![d],
        dec_norm_shift: vec![d],
        head_weight: vec![d, arch.token_dim()],
        head_bias: vec![arch.token_dim()],
    }
}

/// Seeded initialization: Glorot-uniform matrices, truncated-normal (σ 0.02)
/// positional embeddings and mask token, unit LN scales, zero shifts and
/// biases.
pub fn init_params(arch: &ArchConfig, seed: u64) -> ModelParams<DenseArray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    param_shapes(arch).map(|name, shape| {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        if leaf.ends_with("weight") {
            xavier_uniform(shape[0], shape[1], &mut rng)
        } else if leaf.starts_with("enc_pos") || leaf.starts_with("dec_pos") || leaf == "mask_token" {
            truncated_normal(shape, 0.02, &mut rng)
        } else if leaf.ends_with("scale") {
            DenseArray::full(shape.clone(), 1.0)
        } else {
            DenseArray::zeros(shape.clone())
        }
    })
}
