//! Source warm-up, then per-epoch pseudo-labelling, bank rebuild and batched
//! optimisation of the combined objective.

pub mod ablation;
mod adam;
mod config;

pub use adam::{adam_step, AdamParams, AdamState};
pub use config::{parse_key_values, CameraLoss, ContrastiveVariant, PaceKind, TrainConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{sample_frames, split_clips, Clip, Dataset, Domain};
use crate::diffcore::{l2_normalize, log_sum_exp, NodeId, Tape, Tensor2};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EpochMetrics, ItemLabels, MetricsReport};
use crate::exec::Exec;
use crate::losses::{total_loss, Confusion, LossParts, SoftmaxCe, WeightedContrastive};
use crate::membank::MemoryBank;
use crate::model::{Model, ModelDims};
use crate::pseudo::{pseudo_label_run, ClusterAssignment};
use crate::selfpaced::{
    gamma_from_knn, gamma_step, optimal_weight, source_weights, SelfPacedState, GAMMA_FLOOR,
};

/// One training sample: a clip (or a whole tracklet) of a tracklet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tracklet: usize,
    pub clip: Clip,
}

/// Snapshot of the adaptation state after an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochState {
    pub epoch: usize,
    /// Pace used during the epoch, in the units of the configured policy.
    pub gamma: f64,
    /// Pseudo-labels of the target samples, if the contrastive term is on.
    pub assignment: Option<ClusterAssignment>,
    /// Counts bank rebuilds; changes exactly once per epoch with contrast.
    pub bank_snapshot: usize,
    pub lr: f64,
    pub losses: LossParts,
    /// Mean contrastive weight on target queries' own keys.
    pub mean_target_weight: f64,
}

pub struct Trainer {
    config: TrainConfig,
    dataset: Dataset,
    model: Model,
    adam: AdamState,
    rng: ChaCha8Rng,
    source: Vec<(Sample, usize)>,
    target: Vec<Sample>,
    eval_labels: ItemLabels,
    source_order: Vec<usize>,
    source_cursor: usize,
    pace: SelfPacedState,
    epoch: usize,
    pseudo_refreshes: usize,
    bank_rebuilds: usize,
    target_weights: Vec<f64>,
    state: Option<EpochState>,
}

fn samples_of(
    tracklet: usize,
    dataset: &Dataset,
    n_clips: usize,
    fpt: usize,
) -> Result<Vec<Sample>> {
    let clips = split_clips(&dataset.tracklets[tracklet], n_clips)?;
    if let Some(c) = clips.iter().find(|c| c.len() < fpt) {
        return Err(Error::ClipTooShort {
            frames: c.len(),
            chunks: fpt,
        });
    }
    Ok(clips
        .into_iter()
        .map(|clip| Sample { tracklet, clip })
        .collect())
}

struct Batch {
    source: Vec<usize>,
    target: Vec<usize>,
}

impl Trainer {
    pub fn new(dataset: Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let classes = dataset.source_classes();
        if classes.is_empty() {
            return Err(Error::NoSourceRows);
        }
        if dataset.target().next().is_none() {
            return Err(Error::NoTargetRows);
        }
        let n_clips = config.effective_clips();
        let fpt = config.frames_per_sample;
        let mut source = Vec::new();
        let mut target = Vec::new();
        let mut eval_labels = ItemLabels {
            ids: Vec::new(),
            cams: Vec::new(),
        };
        for (i, t) in dataset.tracklets.iter().enumerate() {
            let samples = samples_of(i, &dataset, n_clips, fpt)?;
            match t.domain {
                Domain::Source => {
                    let class = classes
                        .binary_search(&t.person)
                        .expect("class list built from source");
                    source.extend(samples.into_iter().map(|s| (s, class)));
                }
                Domain::Target => {
                    target.extend(samples);
                    eval_labels.ids.push(t.person);
                    eval_labels.cams.push(t.camera);
                }
            }
        }
        let dims = ModelDims {
            d_in: dataset.d_in(),
            d_hidden: config.d_hidden,
            d_out: config.d_out,
            n_identities: classes.len(),
            n_cameras: dataset.camera_count(Domain::Target).max(2),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Model::init(dims, &mut rng)?;
        model.camera.grl_scale = config.grl_scale;
        let adam = AdamState::new(
            model.params().len(),
            AdamParams {
                beta1: config.adam_beta1,
                beta2: config.adam_beta2,
                eps: config.adam_eps,
            },
        );
        let pace = SelfPacedState::new(config.gamma0, config.alpha)?;
        Ok(Self {
            source_order: (0..source.len()).collect(),
            source_cursor: usize::MAX,
            config,
            dataset,
            model,
            adam,
            rng,
            source,
            target,
            eval_labels,
            pace,
            epoch: 0,
            pseudo_refreshes: 0,
            bank_rebuilds: 0,
            target_weights: Vec::new(),
            state: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Completed training epochs (warm-up excluded).
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn state(&self) -> Option<&EpochState> {
        self.state.as_ref()
    }

    pub fn source_samples(&self) -> usize {
        self.source.len()
    }

    pub fn target_samples(&self) -> usize {
        self.target.len()
    }

    /// Number of pseudo-label refreshes and bank rebuilds so far.
    pub fn refresh_counts(&self) -> (usize, usize) {
        (self.pseudo_refreshes, self.bank_rebuilds)
    }

    fn next_source(&mut self) -> usize {
        if self.source_cursor >= self.source_order.len() {
            self.source_order.shuffle(&mut self.rng);
            self.source_cursor = 0;
        }
        self.source_cursor += 1;
        self.source_order[self.source_cursor - 1]
    }

    fn sample_rep(&self, s: &Sample) -> Result<Vec<f64>> {
        let frames = &self.dataset.tracklets[s.tracklet].frames[s.clip.frames.clone()];
        self.model.represent(frames)
    }

    fn reps_of<'a>(
        &self,
        samples: impl ExactSizeIterator<Item = &'a Sample>,
    ) -> Result<Vec<Vec<f64>>> {
        let samples: Vec<&Sample> = samples.collect();
        Exec::default()
            .map(samples.len(), |i| self.sample_rep(samples[i]))
            .into_iter()
            .collect()
    }

    /// Representations of every target sample, in sample order.
    pub fn target_sample_reps(&self) -> Result<Vec<Vec<f64>>> {
        self.reps_of(self.target.iter())
    }

    /// Representations of every source sample, in sample order.
    pub fn source_sample_reps(&self) -> Result<Vec<Vec<f64>>> {
        self.reps_of(self.source.iter().map(|(s, _)| s))
    }

    /// Tracklet representations of one domain, in dataset order.
    pub fn tracklet_reps(&self, domain: Domain) -> Result<Vec<Vec<f64>>> {
        tracklet_reps(
            &self.model,
            &self.dataset,
            domain,
            self.config.effective_clips(),
        )
    }

    /// Target retrieval metrics of the current model.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        evaluate(&self.tracklet_reps(Domain::Target)?, &self.eval_labels)
    }

    /// Labels of the target tracklets, in dataset order.
    pub fn eval_labels(&self) -> &ItemLabels {
        &self.eval_labels
    }

    /// Supervised warm-up on the source domain: `δ1·L_CE` only, for the
    /// configured number of warm-up epochs. Returns the mean CE of the last
    /// warm-up epoch (0 without warm-up).
    pub fn pretrain_source(&mut self) -> Result<f64> {
        let mut last = 0.0;
        for _ in 0..self.config.warmup_epochs {
            let mut order: Vec<usize> = (0..self.source.len()).collect();
            order.shuffle(&mut self.rng);
            let mut total = Vec::new();
            for chunk in order.chunks(self.config.batch_size) {
                let batch = Batch {
                    source: chunk.to_vec(),
                    target: Vec::new(),
                };
                let parts = self.step(&batch, self.config.lr, None, None)?;
                total.push(parts.ce);
            }
            last = crate::diffcore::mean(&total);
        }
        Ok(last)
    }

    fn frames_tensor(&mut self, samples: &[&Sample]) -> Result<Tensor2> {
        let fpt = self.config.frames_per_sample;
        let d_in = self.dataset.d_in();
        let mut data = Vec::with_capacity(samples.len() * fpt * d_in);
        for s in samples {
            let frames = &self.dataset.tracklets[s.tracklet].frames;
            for f in sample_frames(&s.clip, fpt, &mut self.rng)? {
                data.extend_from_slice(&frames[f]);
            }
        }
        Tensor2::from_vec(samples.len() * fpt, d_in, data)
    }

    /// One optimisation step on a batch; returns the raw loss terms.
    fn step(
        &mut self,
        batch: &Batch,
        lr: f64,
        mut bank: Option<&mut MemoryBank>,
        gamma: Option<f64>,
    ) -> Result<LossParts> {
        let cfg = self.config.clone();
        let n_src = batch.source.len();
        let n_tgt = batch.target.len();
        let samples: Vec<Sample> = batch
            .source
            .iter()
            .map(|&i| self.source[i].0.clone())
            .chain(batch.target.iter().map(|&i| self.target[i].clone()))
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let x = self.frames_tensor(&refs)?;

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let x = tape.constant(x);
        let reps = bound.represent(&mut tape, x, cfg.frames_per_sample)?;
        let mut parts = LossParts::default();
        let mut terms: Vec<(NodeId, f64)> = Vec::new();

        if n_src > 0 {
            let rows = tape.select_rows(reps, (0..n_src).collect())?;
            let logits = bound.identity_logits(&mut tape, rows)?;
            let labels = batch.source.iter().map(|&i| self.source[i].1).collect();
            let ce = tape.apply(SoftmaxCe { labels }, &[logits])?;
            parts.ce = tape.value(ce).item();
            terms.push((ce, cfg.loss_weights.delta1));
        }
        if n_tgt > 0 && cfg.camera_loss != CameraLoss::None {
            let rows = tape.select_rows(reps, (n_src..n_src + n_tgt).collect())?;
            let scores = bound.camera_scores(&mut tape, rows)?;
            let labels: Vec<usize> = batch
                .target
                .iter()
                .map(|&i| self.dataset.tracklets[self.target[i].tracklet].camera)
                .collect();
            let cam = match cfg.camera_loss {
                CameraLoss::Ce => tape.apply(SoftmaxCe { labels }, &[scores])?,
                _ => tape.apply(Confusion { labels }, &[scores])?,
            };
            parts.cam = tape.value(cam).item();
            terms.push((cam, cfg.loss_weights.delta2));
        }
        let mut bank_rows: Vec<(usize, usize)> = Vec::new();
        if let Some(bank) = bank.as_deref() {
            let n_target_samples = self.target.len();
            if cfg.source_keys {
                bank_rows.extend(
                    batch
                        .source
                        .iter()
                        .enumerate()
                        .map(|(r, &i)| (r, n_target_samples + i)),
                );
            }
            bank_rows.extend(
                batch
                    .target
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| (n_src + r, i)),
            );
            let (contr, own) =
                self.contrastive_term(&mut tape, reps, bank, &bank_rows, n_src, gamma)?;
            self.target_weights.extend(own);
            parts.contr = tape.value(contr).item();
            terms.push((contr, cfg.loss_weights.delta3));
        }
        total_loss(parts, cfg.loss_weights)?;
        let total = tape.weighted_sum(&terms)?;
        let grads = tape.backward(total)?;
        adam_step(
            &mut self.model.params_mut(),
            &grads.records(),
            &mut self.adam,
            lr,
            cfg.weight_decay,
        )?;

        if let Some(bank) = bank.as_deref_mut() {
            let reps = tape.value(reps);
            for &(row, sample) in &bank_rows {
                bank.update(sample, &l2_normalize(reps.row(row))?)?;
            }
        }
        Ok(parts)
    }

    fn contrastive_term(
        &self,
        tape: &mut Tape,
        reps: NodeId,
        bank: &MemoryBank,
        rows: &[(usize, usize)],
        n_src: usize,
        gamma: Option<f64>,
    ) -> Result<(NodeId, Vec<f64>)> {
        let cfg = self.config.clone();
        let queries = tape.select_rows(reps, rows.iter().map(|&(r, _)| r).collect())?;
        let queries = tape.normalize_rows(queries)?;
        let keys = tape.constant(bank.key_matrix().transpose());
        let sim = tape.matmul(queries, keys)?;
        let sim_value = tape.value(sim).clone();
        let n_keys = bank.len();
        let n_target_samples = self.target.len();
        let key_class = |k: usize| -> Option<usize> {
            let members = &bank.keys()[k].members;
            members
                .first()
                .filter(|&&m| m >= n_target_samples)
                .map(|&m| self.source[m - n_target_samples].1)
        };
        let mut weights = Tensor2::zeros(rows.len(), n_keys);
        let mut row_gammas = vec![0.0; rows.len()];
        let mut own_weights = Vec::new();
        for (q, &(row, sample)) in rows.iter().enumerate() {
            let own = bank.key_of(sample)?;
            if row < n_src {
                let class = Some(self.source[sample - n_target_samples].1);
                for k in 0..n_keys {
                    if let Some(c) = key_class(k) {
                        weights[(q, k)] = source_weights(class, Some(c))?;
                    }
                }
                continue;
            }
            match cfg.contrastive {
                ContrastiveVariant::KnnWeighted => {
                    let scaled: Vec<f64> = sim_value
                        .row(q)
                        .iter()
                        .map(|s| s / cfg.temperature)
                        .collect();
                    let lse = log_sum_exp(&scaled);
                    let loss = (lse - scaled[own]).max(0.0);
                    let g = match (cfg.pace, gamma) {
                        (PaceKind::Knn, Some(radius)) => {
                            let s_k = 1.0 - radius * radius / 2.0;
                            (lse - s_k / cfg.temperature).max(GAMMA_FLOOR)
                        }
                        _ => self.pace.gamma,
                    };
                    weights[(q, own)] = optimal_weight(loss, g)?;
                    row_gammas[q] = g;
                }
                _ => weights[(q, own)] = 1.0,
            }
            own_weights.push(weights[(q, own)]);
        }
        let mut objective =
            WeightedContrastive::new(weights, vec![true; rows.len() * n_keys], None)?
                .with_temperature(cfg.temperature)?;
        if cfg.contrastive == ContrastiveVariant::KnnWeighted {
            objective = objective.with_row_gammas(row_gammas)?;
        }
        Ok((tape.apply(objective, &[sim])?, own_weights))
    }

    fn rebuild_bank(&mut self) -> Result<(MemoryBank, ClusterAssignment)> {
        let target_reps = self.target_sample_reps()?;
        let run = pseudo_label_run(&target_reps, self.config.cluster, Exec::default())?;
        self.pseudo_refreshes += 1;
        let assignment = run.assignment;
        let mut features = target_reps;
        let mut labels = assignment.labels.clone();
        let mut cluster_count = assignment.cluster_count;
        if self.config.source_keys {
            features.extend(self.source_sample_reps()?);
            labels.extend(
                self.source
                    .iter()
                    .map(|&(_, c)| Some(assignment.cluster_count + c)),
            );
            cluster_count += self.dataset.source_classes().len();
        }
        let combined = ClusterAssignment {
            labels,
            cluster_count,
        };
        let bank = MemoryBank::rebuild(&features, &combined, self.config.momentum)?;
        self.bank_rebuilds += 1;
        Ok((bank, assignment))
    }

    fn pace_for_epoch(&self) -> Result<Option<f64>> {
        if self.config.contrastive != ContrastiveVariant::KnnWeighted
            || self.config.pace != PaceKind::Knn
        {
            return Ok(None);
        }
        let reps = self.target_sample_reps()?;
        let k = self.config.knn_k.min(reps.len().saturating_sub(1)).max(1);
        gamma_from_knn(&reps, k).map(Some)
    }

    /// Runs one adaptation epoch and evaluates the result on the target
    /// tracklets.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.epoch + 1;
        let lr = self.config.lr_at(epoch);
        let contrast = self.config.contrastive != ContrastiveVariant::None;
        let (mut bank, assignment) = if contrast {
            let (b, a) = self.rebuild_bank()?;
            (Some(b), Some(a))
        } else {
            (None, None)
        };
        let radius = self.pace_for_epoch()?;

        let half_t = self.config.batch_size / 2;
        let half_s = self.config.batch_size - half_t;
        let mut order: Vec<usize> = (0..self.target.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = [Vec::new(), Vec::new(), Vec::new()];
        self.target_weights.clear();
        for chunk in order.chunks(half_t) {
            let source = (0..half_s).map(|_| self.next_source()).collect();
            let batch = Batch {
                source,
                target: chunk.to_vec(),
            };
            let parts = self.step(&batch, lr, bank.as_mut(), radius)?;
            sums[0].push(parts.ce);
            sums[1].push(parts.cam);
            sums[2].push(parts.contr);
        }
        let losses = LossParts {
            ce: crate::diffcore::mean(&sums[0]),
            cam: crate::diffcore::mean(&sums[1]),
            contr: crate::diffcore::mean(&sums[2]),
        };
        let gamma = radius.unwrap_or(self.pace.gamma);
        if self.config.pace == PaceKind::Multiplicative {
            gamma_step(&mut self.pace);
        }
        self.epoch = epoch;
        self.state = Some(EpochState {
            epoch,
            gamma,
            assignment,
            bank_snapshot: self.bank_rebuilds,
            lr,
            losses,
            mean_target_weight: crate::diffcore::mean(&self.target_weights),
        });
        Ok(EpochMetrics {
            epoch,
            report: self.evaluate()?,
            losses,
        })
    }

    /// Metrics of the current model before adaptation, reported as epoch 0.
    pub fn baseline_metrics(&self) -> Result<EpochMetrics> {
        Ok(EpochMetrics {
            epoch: self.epoch,
            report: self.evaluate()?,
            losses: LossParts::default(),
        })
    }
}

/// Representation of every tracklet of `domain`, in dataset order: the mean
/// of its `n_clips` clip representations.
pub fn tracklet_reps(
    model: &Model,
    dataset: &Dataset,
    domain: Domain,
    n_clips: usize,
) -> Result<Vec<Vec<f64>>> {
    let ids: Vec<usize> = (0..dataset.tracklets.len())
        .filter(|&i| dataset.tracklets[i].domain == domain)
        .collect();
    Exec::default()
        .map(ids.len(), |k| {
            let t = &dataset.tracklets[ids[k]];
            let reps = split_clips(t, n_clips)?
                .iter()
                .map(|c| model.represent(&t.frames[c.frames.clone()]))
                .collect::<Result<Vec<_>>>()?;
            crate::model::aggregate(&reps)
        })
        .into_iter()
        .collect()
}

/// Warm-up, epoch-0 evaluation, then every configured epoch.
pub fn train(dataset: Dataset, config: TrainConfig) -> Result<(Model, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(dataset, config)?;
    trainer.pretrain_source()?;
    let mut history = vec![trainer.baseline_metrics()?];
    for _ in 0..trainer.config().epochs {
        history.push(trainer.train_epoch()?);
    }
    Ok((trainer.into_model(), history))
}
