//! The conditional implicit network.
//!
//! A point cloud is encoded once into a [`FeatureVolume`]. A query `q` is
//! then described by its positional code `q_e` and the trilinearly sampled
//! volume feature `G_q`; two independent residual MLP heads map the
//! concatenation `[q_e, G_q]` to occupancy and saliency probabilities.
//!
//! Every forward pass has a traced variant whose backward pass yields exact
//! gradients for the parameters, the volume values and the query coordinates.

mod encoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{FeatureVolume, PointCloud, TrilinearStencil, Vec3};
use crate::nn::{sigmoid, ParamLayout, ResMlp, ResMlpTrace};

use encoder::{EncodeTrace, Encoder};

/// Points farther than this from the origin along any axis are rejected by
/// [`FieldModel::encode`]. Canonical clouds fit in `[-0.5, 0.5]^3`; the
/// margin admits rotated and noise-perturbed training views.
pub const ENCODE_LIMIT: f64 = 1.5;

/// Rows decoded per chunk on the untraced evaluation path.
pub const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderVariant {
    /// Point network, scatter-mean and a three-level U-Net.
    Full,
    /// Shallow point MLP, scatter-mean and two convolutions.
    Lite,
}

impl EncoderVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderVariant::Full => "full",
            EncoderVariant::Lite => "lite",
        }
    }
}

impl std::str::FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(EncoderVariant::Full),
            "lite" => Ok(EncoderVariant::Lite),
            other => Err(Error::invalid("encoder", format!("unknown variant `{other}` (full|lite)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Per-point feature width.
    pub c1: usize,
    /// Volume feature width.
    pub c2: usize,
    /// Positional code width.
    pub ce: usize,
    pub volume_resolution: [usize; 3],
    pub encoder: EncoderVariant,
    pub point_hidden: usize,
    pub point_blocks: usize,
    /// Resolution levels of the U-Net (full encoder only).
    pub unet_levels: usize,
    pub pos_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_blocks: usize,
}

impl ModelConfig {
    pub fn full(volume_resolution: [usize; 3]) -> Self {
        Self {
            c1: 32,
            c2: 32,
            ce: 32,
            volume_resolution,
            encoder: EncoderVariant::Full,
            point_hidden: 32,
            point_blocks: 2,
            unet_levels: 3,
            pos_hidden: 32,
            decoder_hidden: 32,
            decoder_blocks: 5,
        }
    }

    pub fn lite(volume_resolution: [usize; 3]) -> Self {
        Self {
            encoder: EncoderVariant::Lite,
            point_blocks: 0,
            unet_levels: 1,
            decoder_blocks: 2,
            ..Self::full(volume_resolution)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("c1", self.c1),
            ("c2", self.c2),
            ("ce", self.ce),
            ("point_hidden", self.point_hidden),
            ("pos_hidden", self.pos_hidden),
            ("decoder_hidden", self.decoder_hidden),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::invalid(name, "must be >= 1"));
            }
        }
        if self.volume_resolution.iter().any(|&d| d < 2) {
            return Err(Error::invalid(
                "volume_resolution",
                format!("{:?}: every axis needs >= 2", self.volume_resolution),
            ));
        }
        if self.encoder == EncoderVariant::Full && self.unet_levels == 0 {
            return Err(Error::invalid("unet_levels", "must be >= 1"));
        }
        Ok(())
    }
}

/// Occupancy and saliency of one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub occupancy: f64,
    pub saliency: f64,
}

/// Which decoder heads a query pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub occupancy: bool,
    pub saliency: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads {
        occupancy: true,
        saliency: true,
    };
    pub const OCCUPANCY: Heads = Heads {
        occupancy: true,
        saliency: false,
    };
    pub const SALIENCY: Heads = Heads {
        occupancy: false,
        saliency: true,
    };
}

/// Either a cloud to encode or a volume encoded earlier.
#[derive(Debug, Clone, Copy)]
pub enum FieldSource<'a> {
    Cloud(&'a PointCloud),
    Volume(&'a FeatureVolume),
}

/// Intermediate values of a traced query pass.
#[derive(Debug, Clone)]
pub struct QueryTrace {
    stencils: Vec<TrilinearStencil>,
    pos: ResMlpTrace,
    occ: Option<ResMlpTrace>,
    sal: Option<ResMlpTrace>,
    /// Empty when the head was not evaluated.
    pub occupancy: Vec<f64>,
    pub saliency: Vec<f64>,
}

impl QueryTrace {
    pub fn len(&self) -> usize {
        self.stencils.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stencils.is_empty()
    }
}

/// Traced encoder pass; feed to [`FieldModel::encode_backward`].
#[derive(Debug, Clone)]
pub struct EncodedCloud {
    pub volume: FeatureVolume,
    trace: EncodeTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    encoder: Encoder,
    pos: ResMlp,
    occ_head: ResMlp,
    sal_head: ResMlp,
}

impl FieldModel {
    /// Fresh model with fan-in uniform initialization drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = std::mem::take(&mut model.params);
        model.encoder.init(&mut params, &mut rng);
        model.pos.init(&mut params, &mut rng);
        model.occ_head.init(&mut params, &mut rng);
        model.sal_head.init(&mut params, &mut rng);
        model.params = params;
        Ok(model)
    }

    /// Model with the given parameter vector (for example from a checkpoint).
    pub fn with_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        if params.len() != model.params.len() {
            return Err(Error::LengthMismatch {
                what: "parameter vector vs model layout",
                left: params.len(),
                right: model.params.len(),
            });
        }
        model.params = params;
        Ok(model)
    }

    fn skeleton(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let encoder = Encoder::new(&mut layout, &config);
        let pos = ResMlp::new(&mut layout, "positional", 3, config.pos_hidden, 0, config.ce);
        let head_in = config.ce + config.c2;
        let occ_head = ResMlp::new(
            &mut layout,
            "occupancy_head",
            head_in,
            config.decoder_hidden,
            config.decoder_blocks,
            1,
        );
        let sal_head = ResMlp::new(
            &mut layout,
            "saliency_head",
            head_in,
            config.decoder_hidden,
            config.decoder_blocks,
            1,
        );
        Ok(Self {
            params: vec![0.0; layout.len()],
            config,
            layout,
            encoder,
            pos,
            occ_head,
            sal_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Adds constant offsets to the occupancy and saliency logits.
    pub fn shift_logits(&mut self, occupancy: f64, saliency: f64) {
        self.occ_head.output_layer().bias_mut(&mut self.params)[0] += occupancy;
        self.sal_head.output_layer().bias_mut(&mut self.params)[0] += saliency;
    }

    fn check_cloud(cloud: &PointCloud) -> Result<()> {
        for (index, p) in cloud.points().iter().enumerate() {
            let m = p.amax();
            if m > ENCODE_LIMIT {
                return Err(Error::OutsideCanonical { index, value: m });
            }
        }
        Ok(())
    }

    fn make_volume(&self, values: Vec<f64>) -> FeatureVolume {
        FeatureVolume::canonical(self.config.c2, self.config.volume_resolution, values)
            .expect("config validated")
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<FeatureVolume> {
        Self::check_cloud(cloud)?;
        let (values, _) = self.encoder.forward(&self.params, cloud.points(), false);
        Ok(self.make_volume(values))
    }

    pub fn encode_traced(&self, cloud: &PointCloud) -> Result<EncodedCloud> {
        Self::check_cloud(cloud)?;
        let (values, trace) = self.encoder.forward(&self.params, cloud.points(), true);
        Ok(EncodedCloud {
            volume: self.make_volume(values),
            trace: trace.expect("traced"),
        })
    }

    /// Accumulates encoder parameter gradients from a volume-value gradient.
    pub fn encode_backward(&self, encoded: &EncodedCloud, d_volume: &[f64], grads: &mut [f64]) {
        debug_assert_eq!(d_volume.len(), encoded.volume.values().len());
        self.encoder.backward(&self.params, &encoded.trace, d_volume, grads);
    }

    fn check_volume(&self, volume: &FeatureVolume) -> Result<()> {
        if volume.channels() != self.config.c2 {
            return Err(Error::LengthMismatch {
                what: "volume channels vs c2",
                left: volume.channels(),
                right: self.config.c2,
            });
        }
        Ok(())
    }

    fn check_queries(queries: &[Vec3]) -> Result<()> {
        match queries.iter().position(|q| !q.iter().all(|v| v.is_finite())) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    fn flatten(queries: &[Vec3]) -> Vec<f64> {
        queries.iter().flat_map(|q| [q.x, q.y, q.z]).collect()
    }

    /// Positional codes, `ce` values per query.
    pub fn positional_encode(&self, queries: &[Vec3]) -> Result<Vec<f64>> {
        Self::check_queries(queries)?;
        Ok(self.pos.infer(&self.params, &Self::flatten(queries), queries.len()))
    }

    fn check_decode_inputs(&self, q_e: &[f64], g_q: &[f64]) -> Result<usize> {
        let ce = self.config.ce;
        let c2 = self.config.c2;
        if q_e.len() % ce != 0 {
            return Err(Error::invalid("q_e", format!("length {} is not a multiple of ce={ce}", q_e.len())));
        }
        let rows = q_e.len() / ce;
        if g_q.len() != rows * c2 {
            return Err(Error::LengthMismatch {
                what: "G_q length vs rows * c2",
                left: g_q.len(),
                right: rows * c2,
            });
        }
        Ok(rows)
    }

    fn concat(&self, q_e: &[f64], g_q: &[f64], rows: usize) -> Vec<f64> {
        let (ce, c2) = (self.config.ce, self.config.c2);
        let mut x = Vec::with_capacity(rows * (ce + c2));
        for r in 0..rows {
            x.extend_from_slice(&q_e[r * ce..(r + 1) * ce]);
            x.extend_from_slice(&g_q[r * c2..(r + 1) * c2]);
        }
        x
    }

    fn decode(&self, head: &ResMlp, q_e: &[f64], g_q: &[f64]) -> Result<Vec<f64>> {
        let rows = self.check_decode_inputs(q_e, g_q)?;
        let x = self.concat(q_e, g_q, rows);
        Ok(head.infer(&self.params, &x, rows).into_iter().map(sigmoid).collect())
    }

    /// Occupancy probabilities for row-major `q_e` (`ce` per row) and `G_q`
    /// (`c2` per row).
    pub fn decode_occupancy(&self, q_e: &[f64], g_q: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.occ_head, q_e, g_q)
    }

    pub fn decode_saliency(&self, q_e: &[f64], g_q: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.sal_head, q_e, g_q)
    }

    fn gather(volume: &FeatureVolume, stencils: &[TrilinearStencil]) -> Vec<f64> {
        let c = volume.channels();
        let mut g = vec![0.0; stencils.len() * c];
        for (s, out) in stencils.iter().zip(g.chunks_exact_mut(c)) {
            s.gather(volume.values(), c, out);
        }
        g
    }

    /// Untraced evaluation of the requested heads; unrequested outputs are
    /// returned empty.
    pub fn query_volume(&self, volume: &FeatureVolume, queries: &[Vec3], heads: Heads) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_volume(volume)?;
        Self::check_queries(queries)?;
        let mut occ = Vec::new();
        let mut sal = Vec::new();
        for chunk in queries.chunks(EVAL_CHUNK) {
            let rows = chunk.len();
            let q_e = self.pos.infer(&self.params, &Self::flatten(chunk), rows);
            let stencils: Vec<_> = chunk.iter().map(|q| volume.stencil(q)).collect();
            let x = self.concat(&q_e, &Self::gather(volume, &stencils), rows);
            if heads.occupancy {
                occ.extend(self.occ_head.infer(&self.params, &x, rows).into_iter().map(sigmoid));
            }
            if heads.saliency {
                sal.extend(self.sal_head.infer(&self.params, &x, rows).into_iter().map(sigmoid));
            }
        }
        Ok((occ, sal))
    }

    /// Traced query pass for later [`FieldModel::query_backward`].
    pub fn query_traced(&self, volume: &FeatureVolume, queries: &[Vec3], heads: Heads) -> Result<QueryTrace> {
        self.check_volume(volume)?;
        Self::check_queries(queries)?;
        let rows = queries.len();
        let pos = self.pos.forward(&self.params, &Self::flatten(queries), rows);
        let stencils: Vec<_> = queries.iter().map(|q| volume.stencil(q)).collect();
        let x = self.concat(&pos.output, &Self::gather(volume, &stencils), rows);
        let occ = heads.occupancy.then(|| self.occ_head.forward(&self.params, &x, rows));
        let sal = heads.saliency.then(|| self.sal_head.forward(&self.params, &x, rows));
        let probs = |t: &Option<ResMlpTrace>| -> Vec<f64> {
            t.as_ref().map_or_else(Vec::new, |t| t.output.iter().map(|&z| sigmoid(z)).collect())
        };
        Ok(QueryTrace {
            occupancy: probs(&occ),
            saliency: probs(&sal),
            stencils,
            pos,
            occ,
            sal,
        })
    }

    /// Backpropagates `d_occ` / `d_sal` (gradients with respect to the output
    /// probabilities) through a traced query pass.
    ///
    /// Parameter gradients accumulate into `grads`, volume-value gradients
    /// into `d_volume`; query-coordinate gradients are returned when
    /// `want_dq`.
    #[allow(clippy::too_many_arguments)]
    pub fn query_backward(
        &self,
        volume: &FeatureVolume,
        trace: &QueryTrace,
        d_occ: Option<&[f64]>,
        d_sal: Option<&[f64]>,
        mut grads: Option<&mut [f64]>,
        d_volume: Option<&mut [f64]>,
        want_dq: bool,
    ) -> Option<Vec<Vec3>> {
        let rows = trace.len();
        let (ce, c2) = (self.config.ce, self.config.c2);
        let mut d_x = vec![0.0; rows * (ce + c2)];
        let heads = [
            (&self.occ_head, &trace.occ, &trace.occupancy, d_occ),
            (&self.sal_head, &trace.sal, &trace.saliency, d_sal),
        ];
        for (head, t, probs, d) in heads {
            let (Some(t), Some(d)) = (t, d) else { continue };
            debug_assert_eq!(d.len(), rows);
            let d_logit: Vec<f64> = d.iter().zip(probs).map(|(g, p)| g * p * (1.0 - p)).collect();
            let dx = head
                .backward(&self.params, t, &d_logit, grads.as_deref_mut(), true)
                .expect("requested");
            d_x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
        let mut d_qe = Vec::with_capacity(rows * ce);
        let mut d_g = Vec::with_capacity(rows * c2);
        for r in 0..rows {
            let row = &d_x[r * (ce + c2)..(r + 1) * (ce + c2)];
            d_qe.extend_from_slice(&row[..ce]);
            d_g.extend_from_slice(&row[ce..]);
        }
        if let Some(dv) = d_volume {
            for (s, g) in trace.stencils.iter().zip(d_g.chunks_exact(c2)) {
                s.scatter(g, c2, dv);
            }
        }
        let d_pos = self.pos.backward(&self.params, &trace.pos, &d_qe, grads, want_dq)?;
        Some(
            trace
                .stencils
                .iter()
                .enumerate()
                .map(|(r, s)| {
                    let from_volume = s.query_grad(volume.values(), c2, &d_g[r * c2..(r + 1) * c2]);
                    Vec3::new(d_pos[3 * r], d_pos[3 * r + 1], d_pos[3 * r + 2]) + from_volume
                })
                .collect(),
        )
    }

    /// Occupancy and saliency at every query, encoding the cloud first when
    /// no cached volume is supplied.
    pub fn evaluate_field(&self, source: FieldSource<'_>, queries: &[Vec3]) -> Result<Vec<FieldSample>> {
        let owned;
        let volume = match source {
            FieldSource::Volume(v) => v,
            FieldSource::Cloud(c) => {
                owned = self.encode(c)?;
                &owned
            }
        };
        let (occ, sal) = self.query_volume(volume, queries, Heads::BOTH)?;
        Ok(occ
            .into_iter()
            .zip(sal)
            .map(|(occupancy, saliency)| FieldSample { occupancy, saliency })
            .collect())
    }
}

#[cfg(test)]
mod tests;
