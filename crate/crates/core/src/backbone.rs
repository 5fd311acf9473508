//! Autoformer-style encoder/decoder used for both fast and slow learners.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autocorrelation::{AutoCorrConfig, AutoCorrelationLayer, DelaySet};
use crate::decomposition::{decompose, series_decompose, DEFAULT_KERNEL};
use crate::tensor::{invalid, Bound, Linear, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Lookback window length; must be even.
    pub input_len: usize,
    pub pred_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub kernel: usize,
    /// Auto-correlation top-k factor.
    pub c: f64,
    pub in_dim: usize,
    /// Either `in_dim` (multivariate) or 1 (single target channel).
    pub out_dim: usize,
    /// Input channel forecast when `out_dim == 1 < in_dim`.
    pub target_index: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_len: 48,
            pred_len: 24,
            d_model: 16,
            d_ff: 32,
            enc_layers: 2,
            dec_layers: 1,
            heads: 2,
            kernel: DEFAULT_KERNEL,
            c: 1.0,
            in_dim: 1,
            out_dim: 1,
            target_index: 0,
        }
    }
}

impl BackboneConfig {
    pub fn label_len(&self) -> usize {
        self.input_len / 2
    }

    /// Decoder sequence length `B/2 + O`.
    pub fn decoder_len(&self) -> usize {
        self.label_len() + self.pred_len
    }

    pub fn autocorr(&self) -> AutoCorrConfig {
        AutoCorrConfig {
            c: self.c,
            heads: self.heads,
            d_model: self.d_model,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let positive = [
            ("input_len", self.input_len),
            ("pred_len", self.pred_len),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("kernel", self.kernel),
            ("in_dim", self.in_dim),
            ("out_dim", self.out_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid("backbone", format!("{name} must be positive")));
            }
        }
        if self.input_len % 2 != 0 {
            return Err(invalid("backbone", format!("input_len {} must be even", self.input_len)));
        }
        if self.out_dim != 1 && self.out_dim != self.in_dim {
            return Err(invalid("backbone", "out_dim must be 1 or in_dim"));
        }
        if self.target_index >= self.in_dim {
            return Err(invalid("backbone", "target_index out of range"));
        }
        if self.kernel % 2 == 0 || self.kernel > 2 * self.label_len() - 1 {
            return Err(invalid(
                "backbone",
                format!("kernel {} must be odd and at most {}", self.kernel, 2 * self.label_len() - 1),
            ));
        }
        self.autocorr().validate()
    }
}

/// Seasonal and trend initialisation of the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInput {
    /// `[.., B/2 + O, D]`, zero over the last `O` steps.
    pub seasonal_init: Tensor,
    /// `[.., B/2 + O, D]`, lookback mean over the last `O` steps.
    pub trend_init: Tensor,
}

/// Decomposes the second half of the lookback window and appends the zero /
/// mean placeholders for the horizon.
pub fn prepare_decoder_input(x: &Tensor, pred_len: usize, kernel: usize) -> Result<DecoderInput, TensorError> {
    let (outer, len, feat) = x.series_dims();
    if len % 2 != 0 {
        return Err(invalid("prepare_decoder_input", format!("lookback {len} must be even")));
    }
    let half = len / 2;
    let mut second = Vec::with_capacity(outer * half * feat);
    for o in 0..outer {
        let s = o * len * feat + half * feat;
        second.extend_from_slice(&x.data()[s..s + half * feat]);
    }
    let parts = series_decompose(&Tensor::new(vec![outer, half, feat], second)?, kernel)?;
    let dec_len = half + pred_len;
    let mut seasonal = vec![0.0; outer * dec_len * feat];
    let mut trend = vec![0.0; outer * dec_len * feat];
    for o in 0..outer {
        let src = o * half * feat;
        let dst = o * dec_len * feat;
        seasonal[dst..dst + half * feat].copy_from_slice(&parts.seasonal.data()[src..src + half * feat]);
        trend[dst..dst + half * feat].copy_from_slice(&parts.trend_cyclical.data()[src..src + half * feat]);
        for c in 0..feat {
            let mean = (0..len).map(|t| x.data()[o * len * feat + t * feat + c]).sum::<f64>() / len as f64;
            for t in half..dec_len {
                trend[dst + t * feat + c] = mean;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r.saturating_sub(2)] = dec_len;
    if r == 1 {
        shape = vec![dec_len];
    }
    Ok(DecoderInput {
        seasonal_init: Tensor::new(shape.clone(), seasonal)?,
        trend_init: Tensor::new(shape, trend)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, true, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, p, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn: AutoCorrelationLayer,
    pub ff: FeedForward,
    pub kernel: usize,
}

impl EncoderLayer {
    /// Seasonal stream only; both trend parts are dropped.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<(Var, Vec<DelaySet>), TensorError> {
        let (a, picks) = self.attn.forward(tape, p, h, h, h)?;
        let r = tape.add(a, h)?;
        let (s1, _) = decompose(tape, r, self.kernel)?;
        let f = self.ff.forward(tape, p, s1)?;
        let r = tape.add(f, s1)?;
        let (s2, _) = decompose(tape, r, self.kernel)?;
        Ok((s2, picks))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: AutoCorrelationLayer,
    pub cross_attn: AutoCorrelationLayer,
    pub ff: FeedForward,
    /// Per-stage trend projections `d_model -> out_dim`, no bias.
    pub trend_proj: [Linear; 3],
    pub kernel: usize,
}

impl DecoderLayer {
    /// Returns the stage-3 seasonal stream and `trend_acc + Σ_i θ_i C_i`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h: Var,
        enc_out: Var,
        trend_acc: Var,
    ) -> Result<(Var, Var), TensorError> {
        let (a, _) = self.self_attn.forward(tape, p, h, h, h)?;
        let r = tape.add(a, h)?;
        let (s1, c1) = decompose(tape, r, self.kernel)?;
        let (b, _) = self.cross_attn.forward(tape, p, s1, enc_out, enc_out)?;
        let r = tape.add(b, s1)?;
        let (s2, c2) = decompose(tape, r, self.kernel)?;
        let f = self.ff.forward(tape, p, s2)?;
        let r = tape.add(f, s2)?;
        let (s3, c3) = decompose(tape, r, self.kernel)?;
        let mut acc = trend_acc;
        for (proj, c) in self.trend_proj.iter().zip([c1, c2, c3]) {
            let t = proj.forward(tape, p, c)?;
            acc = tape.add(acc, t)?;
        }
        Ok((s3, acc))
    }
}

/// Output head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Head {
    /// `θ_S·S + C`.
    Plain { seasonal: Linear },
    /// `θ_S·(S ⊕ S_slow) + θ_C·(C ⊕ C_slow)`.
    Fused { seasonal: Linear, trend: Linear },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Plain,
    Fused,
}

/// Decoder features of one forward pass.
#[derive(Clone, Debug)]
pub struct LearnerFeatures {
    /// `[N, B/2 + O, d_model]`
    pub seasonal: Var,
    /// `[N, B/2 + O, out_dim]`
    pub trend: Var,
    /// `[N, O, out_dim]`
    pub prediction: Var,
    /// Delays of the first encoder self-correlation, `N * heads` sets.
    pub first_delays: Vec<DelaySet>,
}

/// Features handed from the slow learner to a fused head; treated as
/// constants by the caller's tape.
#[derive(Clone, Debug, PartialEq)]
pub struct SlowFeatures {
    pub seasonal: Tensor,
    pub trend: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    params: ParamStore,
    enc_embed: Linear,
    encoders: Vec<EncoderLayer>,
    dec_embed: Linear,
    decoders: Vec<DecoderLayer>,
    head: Head,
    recon: Option<Linear>,
}

impl Backbone {
    /// Builds a backbone with uniform `±1/sqrt(fan_in)` initialisation from
    /// `seed`. `reconstruction` adds a linear head `d_model -> in_dim` over
    /// encoder features.
    pub fn new(cfg: &BackboneConfig, head: HeadKind, reconstruction: bool, seed: u64) -> Result<Self, TensorError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, out) = (cfg.d_model, cfg.out_dim);
        let ac = cfg.autocorr();
        let enc_embed = Linear::new(&mut store, "enc.embed", cfg.in_dim, d, true, &mut rng);
        let mut encoders = Vec::new();
        for l in 0..cfg.enc_layers {
            encoders.push(EncoderLayer {
                attn: AutoCorrelationLayer::new(&mut store, &format!("enc.{l}.attn"), &ac, &mut rng)?,
                ff: FeedForward::new(&mut store, &format!("enc.{l}.ff"), d, cfg.d_ff, &mut rng),
                kernel: cfg.kernel,
            });
        }
        let dec_embed = Linear::new(&mut store, "dec.embed", cfg.in_dim, d, true, &mut rng);
        let mut decoders = Vec::new();
        for l in 0..cfg.dec_layers {
            let self_attn = AutoCorrelationLayer::new(&mut store, &format!("dec.{l}.self_attn"), &ac, &mut rng)?;
            let cross_attn = AutoCorrelationLayer::new(&mut store, &format!("dec.{l}.cross_attn"), &ac, &mut rng)?;
            let ff = FeedForward::new(&mut store, &format!("dec.{l}.ff"), d, cfg.d_ff, &mut rng);
            let trend_proj = [1, 2, 3].map(|i| Linear::new(&mut store, &format!("dec.{l}.trend{i}"), d, out, false, &mut rng));
            decoders.push(DecoderLayer {
                self_attn,
                cross_attn,
                ff,
                trend_proj,
                kernel: cfg.kernel,
            });
        }
        let head = match head {
            HeadKind::Plain => Head::Plain {
                seasonal: Linear::new(&mut store, "head.seasonal", d, out, true, &mut rng),
            },
            HeadKind::Fused => {
                let seasonal = Linear::new(&mut store, "head.fused_seasonal", 2 * d, out, true, &mut rng);
                let trend = Linear::new(&mut store, "head.fused_trend", 2 * out, out, false, &mut rng);
                // start as a pass-through of the learner's own trend stream
                let w = store.get_mut(trend.weight).data_mut();
                w.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..out {
                    w[i * out + i] = 1.0;
                }
                Head::Fused { seasonal, trend }
            }
        };
        let recon = reconstruction.then(|| Linear::new(&mut store, "recon", d, cfg.in_dim, true, &mut rng));
        Ok(Backbone {
            cfg: cfg.clone(),
            params: store,
            enc_embed,
            encoders,
            dec_embed,
            decoders,
            head,
            recon,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.head {
            Head::Plain { .. } => HeadKind::Plain,
            Head::Fused { .. } => HeadKind::Fused,
        }
    }

    pub fn has_reconstruction(&self) -> bool {
        self.recon.is_some()
    }

    pub fn encoders(&self) -> &[EncoderLayer] {
        &self.encoders
    }

    pub fn decoders(&self) -> &[DecoderLayer] {
        &self.decoders
    }

    fn check_input(&self, x: &Tensor) -> Result<(), TensorError> {
        let (_, len, feat) = x.series_dims();
        if x.rank() != 3 || len != self.cfg.input_len || feat != self.cfg.in_dim {
            return Err(crate::tensor::shape_err(
                "backbone",
                format!(
                    "expected [N, {}, {}], got {:?}",
                    self.cfg.input_len,
                    self.cfg.in_dim,
                    x.shape()
                ),
            ));
        }
        Ok(())
    }

    fn encode(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Vec<DelaySet>), TensorError> {
        let mut h = self.enc_embed.forward(tape, p, x)?;
        let mut first = Vec::new();
        for (i, layer) in self.encoders.iter().enumerate() {
            let (out, picks) = layer.forward(tape, p, h)?;
            if i == 0 {
                first = picks;
            }
            h = out;
        }
        Ok((h, first))
    }

    /// Full forecast pass on a batch `x: [N, B, D]`. A fused head needs the
    /// slow learner's features for the same batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: &Tensor,
        slow: Option<&SlowFeatures>,
    ) -> Result<LearnerFeatures, TensorError> {
        self.check_input(x)?;
        let cfg = &self.cfg;
        let xv = tape.constant(x.clone())?;
        let (enc_out, first_delays) = self.encode(tape, p, xv)?;

        let init = prepare_decoder_input(x, cfg.pred_len, cfg.kernel)?;
        let trend_seed = if cfg.out_dim == cfg.in_dim {
            init.trend_init
        } else {
            select_channel(&init.trend_init, cfg.target_index)?
        };
        let seasonal_in = tape.constant(init.seasonal_init)?;
        let mut h = self.dec_embed.forward(tape, p, seasonal_in)?;
        let mut trend = tape.constant(trend_seed)?;
        for layer in &self.decoders {
            let (s, t) = layer.forward(tape, p, h, enc_out, trend)?;
            h = s;
            trend = t;
        }

        let start = cfg.label_len();
        let prediction = match (&self.head, slow) {
            (Head::Plain { seasonal }, _) => {
                let s = tape.slice_time(h, start, cfg.pred_len)?;
                let s = seasonal.forward(tape, p, s)?;
                let c = tape.slice_time(trend, start, cfg.pred_len)?;
                tape.add(s, c)?
            }
            (Head::Fused { seasonal, trend: theta_c }, Some(sf)) => {
                let s_slow = tape.constant(sf.seasonal.clone())?;
                let c_slow = tape.constant(sf.trend.clone())?;
                let s = tape.slice_time(h, start, cfg.pred_len)?;
                let s_slow = tape.slice_time(s_slow, start, cfg.pred_len)?;
                let c = tape.slice_time(trend, start, cfg.pred_len)?;
                let c_slow = tape.slice_time(c_slow, start, cfg.pred_len)?;
                let s_hat = tape.concat(&[s, s_slow], 2)?;
                let c_hat = tape.concat(&[c, c_slow], 2)?;
                let s = seasonal.forward(tape, p, s_hat)?;
                let c = theta_c.forward(tape, p, c_hat)?;
                tape.add(s, c)?
            }
            (Head::Fused { .. }, None) => {
                return Err(invalid("backbone", "fused head needs slow-learner features"));
            }
        };
        Ok(LearnerFeatures {
            seasonal: h,
            trend,
            prediction,
            first_delays,
        })
    }

    /// Forward pass with frozen parameters; returns the features as plain
    /// tensors plus the prediction.
    pub fn features(&self, x: &Tensor, slow: Option<&SlowFeatures>) -> Result<(SlowFeatures, Tensor, Vec<DelaySet>), TensorError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let f = self.forward(&mut tape, &p, x, slow)?;
        Ok((
            SlowFeatures {
                seasonal: tape.value(f.seasonal).clone(),
                trend: tape.value(f.trend).clone(),
            },
            tape.value(f.prediction).clone(),
            f.first_delays,
        ))
    }

    /// Reconstructs a (masked) lookback window `[N, B, D]` from encoder
    /// features through the reconstruction head.
    pub fn reconstruct(&self, tape: &mut Tape, p: &Bound, x_masked: &Tensor) -> Result<Var, TensorError> {
        self.check_input(x_masked)?;
        let head = self
            .recon
            .ok_or_else(|| invalid("reconstruct", "backbone has no reconstruction head"))?;
        let xv = tape.constant(x_masked.clone())?;
        let (enc, _) = self.encode(tape, p, xv)?;
        head.forward(tape, p, enc)
    }
}

/// Keeps one feature channel: `[.., T, D] -> [.., T, 1]`.
pub fn select_channel(x: &Tensor, channel: usize) -> Result<Tensor, TensorError> {
    let (outer, len, feat) = x.series_dims();
    if channel >= feat {
        return Err(invalid("select_channel", format!("channel {channel} of {feat}")));
    }
    let data = (0..outer * len).map(|r| x.data()[r * feat + channel]).collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            input_len: 8,
            pred_len: 4,
            d_model: 8,
            d_ff: 8,
            enc_layers: 2,
            dec_layers: 1,
            heads: 2,
            kernel: 3,
            c: 1.0,
            in_dim: 2,
            out_dim: 2,
            target_index: 0,
        }
    }

    fn batch(n: usize, cfg: &BackboneConfig, seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..n * cfg.input_len * cfg.in_dim)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
            })
            .collect();
        Tensor::new(vec![n, cfg.input_len, cfg.in_dim], data).unwrap()
    }

    #[test]
    fn decoder_input_constant() {
        let x = Tensor::full(&[1, 8, 2], 7.0);
        let d = prepare_decoder_input(&x, 3, 3).unwrap();
        assert_eq!(d.seasonal_init.shape(), &[1, 7, 2]);
        assert!(d.seasonal_init.data().iter().all(|v| v.abs() < 1e-12));
        assert!(d.trend_init.data().iter().all(|v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn decoder_input_without_horizon_is_plain_decomposition() {
        let x = Tensor::new(vec![1, 6, 1], vec![1.0, 3.0, 2.0, 5.0, 4.0, 9.0]).unwrap();
        let d = prepare_decoder_input(&x, 0, 3).unwrap();
        let parts = series_decompose(&Tensor::column(&[5.0, 4.0, 9.0]), 3).unwrap();
        assert_eq!(d.seasonal_init.data(), parts.seasonal.data());
        assert_eq!(d.trend_init.data(), parts.trend_cyclical.data());
    }

    #[test]
    fn decoder_input_hand_example() {
        let x = Tensor::column(&[1.0, 2.0, 4.0, 8.0]);
        let d = prepare_decoder_input(&x, 2, 3).unwrap();
        // second half [4, 8] padded to [4, 4, 8, 8]
        let trend = [16.0 / 3.0, 20.0 / 3.0, 3.75, 3.75];
        let seasonal = [4.0 - 16.0 / 3.0, 8.0 - 20.0 / 3.0, 0.0, 0.0];
        for i in 0..4 {
            assert!((d.trend_init.data()[i] - trend[i]).abs() < 1e-12);
            assert!((d.seasonal_init.data()[i] - seasonal[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_lookback_rejected() {
        assert!(prepare_decoder_input(&Tensor::column(&[1.0, 2.0, 3.0]), 1, 1).is_err());
        let cfg = BackboneConfig { input_len: 7, ..tiny() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn prediction_shape_and_finiteness() {
        let cfg = tiny();
        let b = Backbone::new(&cfg, HeadKind::Plain, false, 3).unwrap();
        let (_, pred, delays) = b.features(&batch(3, &cfg, 1), None).unwrap();
        assert_eq!(pred.shape(), &[3, 4, 2]);
        assert!(pred.is_finite());
        assert_eq!(delays.len(), 3 * cfg.heads);
    }

    #[test]
    fn univariate_output_selects_target() {
        let cfg = BackboneConfig { out_dim: 1, target_index: 1, ..tiny() };
        let b = Backbone::new(&cfg, HeadKind::Plain, false, 3).unwrap();
        let (f, pred, _) = b.features(&batch(2, &cfg, 5), None).unwrap();
        assert_eq!(pred.shape(), &[2, 4, 1]);
        assert_eq!(f.trend.shape(), &[2, 8, 1]);
    }

    #[test]
    fn zero_input_zero_biases_gives_zero_encoder_output() {
        let cfg = tiny();
        let mut b = Backbone::new(&cfg, HeadKind::Plain, false, 9).unwrap();
        let names: Vec<String> = b.params().iter().map(|(n, _)| n.to_string()).collect();
        for (i, n) in names.iter().enumerate() {
            if n.ends_with(".bias") {
                b.params_mut().values_mut()[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let p = b.params().bind(&mut tape, false).unwrap();
        let h = tape.constant(Tensor::zeros(&[2, 8, 8])).unwrap();
        let (out, _) = b.encoders()[0].forward(&mut tape, &p, h).unwrap();
        assert_eq!(tape.shape(out), &[2, 8, 8]);
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_decoder_weights_leave_trend_unchanged() {
        let cfg = tiny();
        let mut b = Backbone::new(&cfg, HeadKind::Plain, false, 2).unwrap();
        b.params_mut().values_mut().iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let mut tape = Tape::new();
        let p = b.params().bind(&mut tape, false).unwrap();
        let h = tape.constant(Tensor::full(&[1, 8, 8], 0.3)).unwrap();
        let enc = tape.constant(Tensor::full(&[1, 8, 8], -0.2)).unwrap();
        let acc = tape.constant(Tensor::full(&[1, 8, 2], 1.5)).unwrap();
        let (s, t) = b.decoders()[0].forward(&mut tape, &p, h, enc, acc).unwrap();
        assert!(tape.value(s).data().iter().all(|v| v.abs() < 1e-15));
        assert_eq!(tape.value(t), tape.value(acc));
    }

    #[test]
    fn trend_accumulates_across_layers() {
        // with the seasonal paths zeroed, stacking two layers adds their
        // stage contributions to the seed
        let cfg = BackboneConfig { dec_layers: 2, ..tiny() };
        let mut b = Backbone::new(&cfg, HeadKind::Plain, false, 4).unwrap();
        let names: Vec<String> = b.params().iter().map(|(n, _)| n.to_string()).collect();
        for (i, n) in names.iter().enumerate() {
            if n.contains("_attn") || n.contains(".ff.") {
                b.params_mut().values_mut()[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let p = b.params().bind(&mut tape, false).unwrap();
        let h = tape.constant(batch(1, &BackboneConfig { input_len: 8, in_dim: 8, ..tiny() }, 3)).unwrap();
        let enc = tape.constant(Tensor::zeros(&[1, 8, 8])).unwrap();
        let seed = tape.constant(Tensor::full(&[1, 8, 2], 0.5)).unwrap();
        let (s1, t1) = b.decoders()[0].forward(&mut tape, &p, h, enc, seed).unwrap();
        let (_, t2) = b.decoders()[1].forward(&mut tape, &p, s1, enc, t1).unwrap();
        let zero = tape.constant(Tensor::zeros(&[1, 8, 2])).unwrap();
        let (_, d1) = b.decoders()[0].forward(&mut tape, &p, h, enc, zero).unwrap();
        let (_, d2) = b.decoders()[1].forward(&mut tape, &p, s1, enc, zero).unwrap();
        for i in 0..16 {
            let want = 0.5 + tape.value(d1).data()[i] + tape.value(d2).data()[i];
            assert!((tape.value(t2).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let cfg = tiny();
        let (d, f, i, o) = (8, 8, 2, 2);
        let ac = 4 * (d * d + d);
        let ff = d * f + f + f * d + d;
        let want = (i * d + d) * 2 + 2 * (ac + ff) + (2 * ac + ff + 3 * d * o) + (d * o + o);
        let b = Backbone::new(&cfg, HeadKind::Plain, false, 0).unwrap();
        assert_eq!(b.num_params(), want);
        assert_eq!(b.num_params(), 1698);
        let b2 = Backbone::new(&cfg, HeadKind::Plain, false, 99).unwrap();
        assert_eq!(b.num_params(), b2.num_params());
    }

    #[test]
    fn fused_head_needs_slow_features() {
        let cfg = tiny();
        let b = Backbone::new(&cfg, HeadKind::Fused, false, 0).unwrap();
        assert!(b.features(&batch(1, &cfg, 0), None).is_err());
    }

    #[test]
    fn gradient_through_two_encoder_layers() {
        let cfg = tiny();
        let b = Backbone::new(&cfg, HeadKind::Plain, false, 12).unwrap();
        let x = batch(2, &BackboneConfig { in_dim: 8, ..tiny() }, 8);
        let flat = b.params().flatten();
        let report = grad_check(
            |tape, theta| {
                let p = b.params().bind_flat(tape, theta)?;
                let mut h = tape.constant(x.clone())?;
                for layer in b.encoders() {
                    h = layer.forward(tape, &p, h)?.0;
                }
                let sq = tape.mul(h, h)?;
                tape.mean(sq)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn end_to_end_gradient() {
        let cfg = BackboneConfig { in_dim: 1, out_dim: 1, ..tiny() };
        let b = Backbone::new(&cfg, HeadKind::Plain, false, 21).unwrap();
        let x = batch(2, &cfg, 77);
        let y = Tensor::full(&[2, 4, 1], 0.25);
        let flat = b.params().flatten();
        let report = grad_check(
            |tape, theta| {
                let p = b.params().bind_flat(tape, theta)?;
                let f = b.forward(tape, &p, &x, None)?;
                let yv = tape.constant(y.clone())?;
                let d = tape.sub(f.prediction, yv)?;
                let sq = tape.mul(d, d)?;
                tape.mean(sq)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
