//! Probe classifier: a small patch-MLP trained on synthetic labels only.
//! Its penultimate activations are the feature space for the Fréchet
//! evaluator, keeping that oracle independent of the generative model.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::synth::{generate_sample, SyntheticSpec, NUM_CLASSES};
use crate::error::{Result, UniteError};
use crate::model::patch;
use crate::rng::{Purpose, RngStream};
use crate::tensor::optim::{self, AdamWConfig};
use crate::tensor::tape::{BufId, Tape};
use crate::tensor::{ParamId, ParamSet, ParamTag, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub hidden: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            image_size: 32,
            channels: 1,
            patch: 4,
            hidden: 64,
            steps: 1000,
            batch: 64,
            lr: 2e-3,
            seed: 1234,
        }
    }
}

/// Two patch-MLP blocks, mean pool, feature layer, linear head.
#[derive(Debug)]
pub struct Probe {
    pub cfg: ProbeConfig,
    pub params: ParamSet,
    emb_w: ParamId,
    emb_b: ParamId,
    pos: ParamId,
    blk_w: ParamId,
    blk_b: ParamId,
    feat_w: ParamId,
    feat_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl Probe {
    pub fn new(cfg: &ProbeConfig) -> Probe {
        let mut rng = RngStream::new(cfg.seed, Purpose::Init);
        let mut ps = ParamSet::new();
        let pdim = cfg.channels * cfg.patch * cfg.patch;
        let h = cfg.hidden;
        let np = (cfg.image_size / cfg.patch) * (cfg.image_size / cfg.patch);
        let emb_w = ps.add("probe.emb.w", ParamTag::Projection, crate::model::ge::xavier([pdim, h], &mut rng));
        let emb_b = ps.add("probe.emb.b", ParamTag::Projection, Tensor::zeros(vec![h]));
        let pos = ps.add("probe.pos", ParamTag::Embedding, crate::model::ge::normal02(vec![np, h], &mut rng));
        let blk_w = ps.add("probe.blk.w", ParamTag::Mlp, crate::model::ge::xavier([h, h], &mut rng));
        let blk_b = ps.add("probe.blk.b", ParamTag::Mlp, Tensor::zeros(vec![h]));
        let feat_w = ps.add("probe.feat.w", ParamTag::Mlp, crate::model::ge::xavier([h, h], &mut rng));
        let feat_b = ps.add("probe.feat.b", ParamTag::Mlp, Tensor::zeros(vec![h]));
        let head_w = ps.add("probe.head.w", ParamTag::Projection, crate::model::ge::xavier([h, NUM_CLASSES], &mut rng));
        let head_b = ps.add("probe.head.b", ParamTag::Projection, Tensor::zeros(vec![NUM_CLASSES]));
        Probe { cfg: cfg.clone(), params: ps, emb_w, emb_b, pos, blk_w, blk_b, feat_w, feat_b, head_w, head_b }
    }

    fn forward(&self, g: &mut Tape, rows: BufId, batch: usize) -> Result<(BufId, BufId)> {
        let np = (self.cfg.image_size / self.cfg.patch).pow(2);
        let w = g.param(&self.params, self.emb_w);
        let b = g.param(&self.params, self.emb_b);
        let mut x = g.linear(rows, w, b)?;
        let pos = g.param(&self.params, self.pos);
        x = g.add_position(x, pos);
        x = g.gelu(x);
        let w = g.param(&self.params, self.blk_w);
        let b = g.param(&self.params, self.blk_b);
        x = g.linear(x, w, b)?;
        x = g.gelu(x);
        let pooled = g.mean_pool_tokens(x, np);
        let w = g.param(&self.params, self.feat_w);
        let b = g.param(&self.params, self.feat_b);
        let mut feats = g.linear(pooled, w, b)?;
        feats = g.gelu(feats);
        let w = g.param(&self.params, self.head_w);
        let b = g.param(&self.params, self.head_b);
        let logits = g.linear(feats, w, b)?;
        debug_assert_eq!(g.rows(logits), batch);
        Ok((feats, logits))
    }

    fn rows_for(&self, images: &[&Tensor]) -> Result<Tensor> {
        patch::patchify_batch(images, self.cfg.patch)
    }

    /// Penultimate activations `[N, hidden]`.
    pub fn features(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut g = Tape::inference();
        let rows = self.rows_for(images)?;
        let rb = g.input(rows);
        let (feats, _) = self.forward(&mut g, rb, images.len())?;
        Ok(g.tensor(feats))
    }

    /// Argmax class per image.
    pub fn classify(&self, images: &[&Tensor]) -> Result<Vec<usize>> {
        let mut g = Tape::inference();
        let rows = self.rows_for(images)?;
        let rb = g.input(rows);
        let (_, logits) = self.forward(&mut g, rb, images.len())?;
        let data = g.data(logits);
        Ok(data
            .chunks(NUM_CLASSES)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, images: &[&Tensor], labels: &[usize]) -> Result<f64> {
        let pred = self.classify(images)?;
        let hits = pred.iter().zip(labels.iter()).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Train on freshly generated class-balanced samples.
    pub fn train(cfg: &ProbeConfig, spec: &SyntheticSpec) -> Result<Probe> {
        if spec.image_size != cfg.image_size || spec.channels != cfg.channels {
            return Err(UniteError::Config("probe/data geometry mismatch".into()));
        }
        let mut probe = Probe::new(cfg);
        let mut data_rng = RngStream::new(cfg.seed, Purpose::Data);
        let adamw = AdamWConfig { weight_decay: 0.01, ..AdamWConfig::default() };
        for step in 1..=cfg.steps {
            let mut images = Vec::with_capacity(cfg.batch);
            let mut labels = Vec::with_capacity(cfg.batch);
            for i in 0..cfg.batch {
                let class = i % NUM_CLASSES;
                images.push(generate_sample(spec, class, &mut data_rng)?);
                labels.push(class);
            }
            let refs: Vec<&Tensor> = images.iter().collect();
            let rows = probe.rows_for(&refs)?;
            let mut g = Tape::recording();
            let rb = g.input(rows);
            let (_, logits) = probe.forward(&mut g, rb, cfg.batch)?;
            let loss = g.cross_entropy(logits, labels)?;
            g.backward(loss)?;
            g.accumulate_param_grads(&mut probe.params);
            optim::grad_clip(&mut probe.params, 5.0);
            optim::adamw_step(&mut probe.params, cfg.lr, &adamw, step)?;
        }
        Ok(probe)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let tensors: Vec<(String, ParamTag, &Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.tag, &p.value))
            .collect();
        let cfg = serde_json::to_value(&self.cfg)
            .map_err(|e| UniteError::Format(format!("probe config encode: {e}")))?;
        checkpoint::save(path, self.cfg.steps, &cfg, &BTreeMap::new(), &tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Probe> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(UniteError::Setup(format!(
                "probe checkpoint `{}` not found; train one with `unite train-probe --out {}`",
                path.display(),
                path.display()
            )));
        }
        let ck = checkpoint::load(path)?;
        let cfg: ProbeConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| UniteError::Format(format!("probe config decode: {e}")))?;
        let mut probe = Probe::new(&cfg);
        for i in 0..probe.params.len() {
            let name = probe.params.get(ParamId(i)).name.clone();
            let t = ck.tensor(&name)?;
            probe.params.get_mut(ParamId(i)).value.data = t.data.clone();
        }
        Ok(probe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::Dataset;

    #[test]
    fn probe_reaches_95_percent_on_fresh_samples() {
        let spec = SyntheticSpec::default();
        let probe = Probe::train(&ProbeConfig::default(), &spec).unwrap();

        let ds = Dataset::build(&spec, 999, 0xfe57, 1000).unwrap();
        let refs: Vec<&Tensor> = ds.images.iter().collect();
        let acc = probe.accuracy(&refs, &ds.labels).unwrap();
        assert!(acc >= 0.95, "probe accuracy {acc}");
    }

    #[test]
    fn save_load_round_trip_preserves_predictions() {
        let spec = SyntheticSpec::default();
        let cfg = ProbeConfig { steps: 30, ..ProbeConfig::default() };
        let probe = Probe::train(&cfg, &spec).unwrap();
        let ds = Dataset::build(&spec, 3, 0xabc, 20).unwrap();
        let refs: Vec<&Tensor> = ds.images.iter().collect();
        let before = probe.classify(&refs).unwrap();
        let feats_before = probe.features(&refs).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("probe.ckpt");
        probe.save(&p).unwrap();
        let loaded = Probe::load(&p).unwrap();
        assert_eq!(loaded.classify(&refs).unwrap(), before);
        assert_eq!(loaded.features(&refs).unwrap().data, feats_before.data);
    }

    #[test]
    fn missing_probe_is_setup_error_naming_the_command() {
        let err = Probe::load("/nonexistent/probe.ckpt").unwrap_err();
        match err {
            UniteError::Setup(msg) => assert!(msg.contains("train-probe"), "{msg}"),
            other => panic!("expected setup error, got {other:?}"),
        }
    }
}
