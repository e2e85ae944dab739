//! Toy multi-stage image encoder.
//!
//! Each stage is a strided downsample (space-to-depth over non-overlapping
//! blocks, i.e. a stride-`k` convolution with kernel `k`) followed by a
//! channel-growing linear filter bank and a SiLU. Outputs obey
//! [`StageShapeLaw`] exactly.
//!
//! Feature maps travel as `tokens × channels` matrices with tokens in
//! row-major spatial order (`h, w, d` for volumes).

use rand::Rng;

use super::shape::{StageShape, StageShapeLaw, N_STAGES};
use crate::dataio::Image;
use crate::error::{CfcmlError, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
struct Stage {
    weight: ParamId,
    bias: ParamId,
    gather: Vec<usize>,
    shape: StageShape,
    patch_cols: usize,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    law: StageShapeLaw,
    input_channels: usize,
    input_spatial: Vec<usize>,
    stages: Vec<Stage>,
}

/// The four stage outputs of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GranularFeatureSet {
    pub features: Vec<Matrix>,
    pub shapes: Vec<StageShape>,
}

/// Flattens a channel-first image into a `voxels × channels` matrix.
pub fn image_to_tokens(image: &Image) -> Matrix {
    let (voxels, channels) = (image.voxels(), image.channels());
    let mut out = Matrix::zeros(voxels, channels);
    for ch in 0..channels {
        for v in 0..voxels {
            out.set(v, ch, image.data()[ch * voxels + v] as f64);
        }
    }
    out
}

/// Index map for space-to-depth: output token `o` gathers its block of
/// input tokens, channels fastest within each block offset.
fn space_to_depth_index(input: &[usize], blocks: &[usize], channels: usize) -> Vec<usize> {
    let out: Vec<usize> = input.iter().zip(blocks).map(|(e, b)| e / b).collect();
    let out_tokens: usize = out.iter().product();
    let block_size: usize = blocks.iter().product();
    let axes = input.len();
    let mut index = Vec::with_capacity(out_tokens * block_size * channels);
    let mut oc = vec![0usize; axes];
    let mut kc = vec![0usize; axes];
    for o in 0..out_tokens {
        let mut rem = o;
        for a in (0..axes).rev() {
            oc[a] = rem % out[a];
            rem /= out[a];
        }
        for k in 0..block_size {
            let mut rem = k;
            for a in (0..axes).rev() {
                kc[a] = rem % blocks[a];
                rem /= blocks[a];
            }
            let src = (0..axes).fold(0, |acc, a| acc * input[a] + oc[a] * blocks[a] + kc[a]);
            for ch in 0..channels {
                index.push(src * channels + ch);
            }
        }
    }
    index
}

impl ImageEncoder {
    /// Registers parameters as `{prefix}.stage{s}.{weight,bias}`.
    pub fn new<R: Rng>(
        prefix: &str,
        law: StageShapeLaw,
        input_channels: usize,
        input_spatial: &[usize],
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if input_channels == 0 {
            return Err(CfcmlError::Shape("image needs ≥ 1 channel".into()));
        }
        let shapes = law.all_stages(input_spatial)?;
        let mut stages = Vec::with_capacity(N_STAGES);
        let mut prev_spatial = input_spatial.to_vec();
        let mut prev_channels = input_channels;
        for (i, shape) in shapes.into_iter().enumerate() {
            let blocks = law.block_factors(i + 1, input_spatial)?;
            let patch_cols = blocks.iter().product::<usize>() * prev_channels;
            let weight = store.register_uniform(
                format!("{prefix}.stage{}.weight", i + 1),
                patch_cols,
                shape.channels,
                patch_cols,
                rng,
            );
            let bias = store.register(
                format!("{prefix}.stage{}.bias", i + 1),
                Matrix::zeros(1, shape.channels),
            );
            stages.push(Stage {
                weight,
                bias,
                gather: space_to_depth_index(&prev_spatial, &blocks, prev_channels),
                patch_cols,
                shape: shape.clone(),
            });
            prev_spatial = shape.spatial;
            prev_channels = shape.channels;
        }
        Ok(Self {
            law,
            input_channels,
            input_spatial: input_spatial.to_vec(),
            stages,
        })
    }

    pub fn law(&self) -> &StageShapeLaw {
        &self.law
    }

    pub fn stage_shapes(&self) -> Vec<StageShape> {
        self.stages.iter().map(|s| s.shape.clone()).collect()
    }

    pub fn check_input(&self, image: &Image) -> Result<()> {
        if image.channels() != self.input_channels || image.spatial() != self.input_spatial {
            return Err(CfcmlError::Shape(format!(
                "encoder expects {} × {:?}, got {} × {:?}",
                self.input_channels,
                self.input_spatial,
                image.channels(),
                image.spatial()
            )));
        }
        Ok(())
    }

    /// Runs all stages on a `voxels × channels` token matrix.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, tokens: Var) -> Result<Vec<Var>> {
        let expected = (self.input_spatial.iter().product(), self.input_channels);
        if g.value(tokens).shape() != expected {
            return Err(CfcmlError::Shape(format!(
                "encoder expects {expected:?} tokens, got {:?}",
                g.value(tokens).shape()
            )));
        }
        let mut x = tokens;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let patches = g.gather(x, stage.gather.clone(), stage.shape.tokens(), stage.patch_cols);
            let mixed = g.matmul(patches, p[stage.weight]);
            let biased = g.add_row_bias(mixed, p[stage.bias]);
            x = g.silu(biased);
            out.push(x);
        }
        Ok(out)
    }
}

/// Encodes one image outside of training.
pub fn encode_image_multistage(
    image: &Image,
    encoder: &ImageEncoder,
    params: &ParamStore,
) -> Result<GranularFeatureSet> {
    encoder.check_input(image)?;
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(image_to_tokens(image));
    let features = encoder
        .forward(&mut g, &p, x)?
        .into_iter()
        .map(|v| g.value(v).clone())
        .collect();
    Ok(GranularFeatureSet {
        features,
        shapes: encoder.stage_shapes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::shape::SpatialMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn space_to_depth_2d() {
        // 4x4 single channel, 2x2 blocks: token 0 gathers (0,0),(0,1),(1,0),(1,1).
        let idx = space_to_depth_index(&[4, 4], &[2, 2], 1);
        assert_eq!(&idx[..4], &[0, 1, 4, 5]);
        assert_eq!(&idx[4..8], &[2, 3, 6, 7]);
        assert_eq!(&idx[12..16], &[10, 11, 14, 15]);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn encoder_outputs_follow_the_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let law = StageShapeLaw::new(4, SpatialMode::Volumetric);
        let enc = ImageEncoder::new("img", law, 1, &[16, 16, 32], &mut store, &mut rng).unwrap();
        let image = Image::new(1, vec![16, 16, 32], (0..8192).map(|i| (i as f32).sin()).collect()).unwrap();
        let set = encode_image_multistage(&image, &enc, &store).unwrap();
        for (s, (f, shape)) in set.features.iter().zip(&set.shapes).enumerate() {
            assert_eq!(shape, &law.stage_shape(s + 1, &[16, 16, 32]).unwrap());
            assert_eq!(f.shape(), (shape.tokens(), 4 * (s + 1)));
            assert!(f.is_finite());
        }
    }

    #[test]
    fn planar_three_channel_stem() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let law = StageShapeLaw::new(8, SpatialMode::Planar);
        let enc = ImageEncoder::new("img", law, 3, &[64, 32], &mut store, &mut rng).unwrap();
        let shapes = enc.stage_shapes();
        assert_eq!(shapes[0].spatial, vec![16, 8]);
        assert_eq!(shapes[3].spatial, vec![2, 1]);
        assert_eq!(store.get(store.id("img.stage1.weight").unwrap()).shape(), (48, 8));
    }

    #[test]
    fn deepest_stage_floors_odd_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let law = StageShapeLaw::new(2, SpatialMode::Volumetric);
        let enc = ImageEncoder::new("img", law, 1, &[16, 16, 24], &mut store, &mut rng).unwrap();
        assert_eq!(enc.stage_shapes()[3].spatial, vec![1, 1, 1]);
        let image = Image::new(1, vec![16, 16, 24], (0..6144).map(|i| (i as f32).cos()).collect()).unwrap();
        let set = encode_image_multistage(&image, &enc, &store).unwrap();
        assert_eq!(set.features[3].shape(), (1, 8));
    }

    #[test]
    fn inadmissible_input_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let law = StageShapeLaw::new(4, SpatialMode::Volumetric);
        assert!(matches!(
            ImageEncoder::new("img", law, 1, &[16, 16, 25], &mut store, &mut rng),
            Err(CfcmlError::Shape(_))
        ));
    }

    #[test]
    fn input_gradient_is_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let law = StageShapeLaw::new(2, SpatialMode::Volumetric);
        let enc = ImageEncoder::new("img", law, 1, &[16, 16], &mut store, &mut rng).unwrap();
        let image = Image::new(1, vec![16, 16], (0..256).map(|i| ((i * 7 % 13) as f32) / 13.0).collect()).unwrap();
        for stage in 0..N_STAGES {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.variable(image_to_tokens(&image));
            let feats = enc.forward(&mut g, &p, x).unwrap();
            let s = g.sum_all(feats[stage]);
            let grads = g.backward(s);
            let gx = grads.get(x).unwrap();
            assert!(gx.data().iter().any(|v| v.abs() > 0.0), "stage {}", stage + 1);
        }
    }
}
