use rand::Rng;

use super::config::{ModelConfig, CONV_BLOCKS};
use super::scoring::{argmax, Selection};
use crate::error::{Error, Result};
use crate::features::{rfn, FRAMES, N_MELS};
use crate::numerics::{BatchStats, Checkpoint, Norm, ParamStore, Tape, Tensor, Var};

/// Batch-norm behavior of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are returned for updating.
    Train,
    /// Running statistics.
    Eval,
}

/// Largest batch pushed through the encoder at once in [`Model::encode`].
const ENCODE_CHUNK: usize = 64;

/// Conv4 encoder plus (optionally) the dummy generator, with named
/// parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    buffers: ParamStore,
}

/// Parameters of a model recorded on one tape, in [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl From<Vec<Var>> for Bound {
    fn from(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(-bound..=bound));
    t
}

fn block(i: usize, what: &str) -> String {
    format!("encoder.block{i}.{what}")
}

impl Model {
    /// Fresh model: conv and affine weights ~ U(±sqrt(6 / fan_in)), biases 0,
    /// batch-norm scale 1 and shift 0.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.encoder.channels;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        for i in 0..CONV_BLOCKS {
            let in_ch = if i == 0 { 1 } else { c };
            params.insert(
                block(i, "conv.weight"),
                uniform(rng, &[c, in_ch, 3, 3], in_ch * 9),
            );
            params.insert(block(i, "bn.weight"), Tensor::full(&[c], 1.0));
            params.insert(block(i, "bn.bias"), Tensor::zeros(&[c]));
            buffers.insert(block(i, "bn.running_mean"), Tensor::zeros(&[c]));
            buffers.insert(block(i, "bn.running_var"), Tensor::full(&[c], 1.0));
        }
        if let Some(g) = config.generator {
            let d = config.encoder.embedding_dim();
            params.insert("generator.fc1.weight", uniform(rng, &[d, g.hidden], d));
            params.insert("generator.fc1.bias", Tensor::zeros(&[1, g.hidden]));
            params.insert(
                "generator.fc2.weight",
                uniform(rng, &[g.hidden, g.hidden], g.hidden),
            );
            params.insert("generator.fc2.bias", Tensor::zeros(&[1, g.hidden]));
            params.insert(
                "generator.proj.weight",
                uniform(rng, &[g.hidden, g.dummies * d], g.hidden),
            );
        }
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Trainable parameters.
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.encoder.embedding_dim()
    }

    /// Records the parameters as leaves of `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound {
            vars: self.params.bind(tape, requires_grad),
        }
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"));
        bound.vars[i]
    }

    /// Applies the configured input normalization to a `(B,1,40,98)` batch.
    pub fn prepare_input(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != (1, N_MELS, FRAMES) {
            return Err(Error::shape(
                "encode",
                format!("expected (B,1,{N_MELS},{FRAMES}), got {:?}", x.shape()),
            ));
        }
        match self.config.rfn {
            Some(cfg) => rfn(x, cfg),
            None => Ok(x.clone()),
        }
    }

    /// Encoder forward on the tape, giving `B×D` embeddings and, in
    /// [`Mode::Train`], the batch statistics of every batch-norm layer.
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let input = self.prepare_input(x)?;
        let batch = input.shape()[0];
        let eps = self.config.encoder.bn_eps;
        let mut h = tape.constant(input);
        let mut stats = Vec::new();
        for i in 0..CONV_BLOCKS {
            h = tape.conv2d(h, self.var(bound, &block(i, "conv.weight")), 1)?;
            let (gamma, beta) = (
                self.var(bound, &block(i, "bn.weight")),
                self.var(bound, &block(i, "bn.bias")),
            );
            let norm = match mode {
                Mode::Train => Norm::Batch,
                Mode::Eval => Norm::Running {
                    mean: self
                        .buffers
                        .get(&block(i, "bn.running_mean"))
                        .expect("running mean")
                        .data(),
                    var: self
                        .buffers
                        .get(&block(i, "bn.running_var"))
                        .expect("running var")
                        .data(),
                },
            };
            let (out, s) = tape.bn_relu_pool(h, gamma, beta, eps, norm)?;
            stats.extend(s);
            h = out;
        }
        let emb = tape.reshape(h, &[batch, self.embedding_dim()])?;
        Ok((emb, stats))
    }

    /// `L×D` dummies generated from the `N×D` prototypes, or `None` for the
    /// baseline.
    pub fn dummies_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prototypes: Var,
    ) -> Result<Option<Var>> {
        let Some(g) = self.config.generator else {
            return Ok(None);
        };
        let h = tape.matmul(prototypes, self.var(bound, "generator.fc1.weight"))?;
        let h = tape.add_row(h, self.var(bound, "generator.fc1.bias"))?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, self.var(bound, "generator.fc2.weight"))?;
        let h = tape.add_row(h, self.var(bound, "generator.fc2.bias"))?;
        let pooled = tape.max_rows(h)?;
        let flat = tape.matmul(pooled, self.var(bound, "generator.proj.weight"))?;
        Ok(Some(
            tape.reshape(flat, &[g.dummies, self.embedding_dim()])?,
        ))
    }

    /// Log-posterior (`Q × (N+1)`, dummy last; `Q × N` for the baseline) of
    /// the query rows of `emb`, with prototypes from the grouped support rows.
    pub fn log_posterior_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        emb: Var,
        support: &[Vec<usize>],
        queries: &[usize],
        selection: Selection<'_>,
    ) -> Result<Var> {
        let scoring = self.config.scoring;
        let n_way = support.len();
        let protos = tape.group_mean(emb, support.to_vec())?;
        let q = tape.gather_rows(emb, queries)?;
        let dk = tape.pairwise_sqdist(q, protos)?;
        let Some(dummies) = self.dummies_graph(tape, bound, protos)? else {
            let logits = tape.scale(dk, -1.0 / scoring.tau_known)?;
            return tape.log_softmax(logits);
        };
        let dd = tape.pairwise_sqdist(q, dummies)?;
        let d_dummy = match selection {
            Selection::Gumbel { tau, noise } => {
                let l = tape.value(dd).shape()[1];
                if noise.len() != queries.len() * l {
                    return Err(Error::shape(
                        "gumbel",
                        format!("{} draws for {}x{l} selections", noise.len(), queries.len()),
                    ));
                }
                let scaled = tape.scale(dd, -1.0 / tau)?;
                let eps = tape.constant(Tensor::new(
                    vec![queries.len(), l],
                    noise.iter().map(|e| e / tau).collect(),
                )?);
                let logits = tape.add(scaled, eps)?;
                let p = tape.softmax(logits)?;
                let mixed = tape.matmul(p, dummies)?;
                tape.row_sqdist(q, mixed)?
            }
            Selection::Argmax { .. } => {
                let l = tape.value(dd).shape()[1];
                let pick: Vec<usize> = tape
                    .value(dd)
                    .data()
                    .chunks(l)
                    .map(|row| argmax(&row.iter().map(|v| -v).collect::<Vec<_>>()))
                    .collect();
                tape.pick_per_row(dd, &pick)?
            }
        };
        let both = tape.concat_cols(&[dk, d_dummy])?;
        let mut factors = vec![-1.0 / scoring.tau_known; n_way];
        factors.push(-1.0 / scoring.tau_dummy());
        let logits = tape.scale_cols(both, &factors)?;
        tape.log_softmax(logits)
    }

    /// Exponential moving average of batch statistics into the running
    /// buffers.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != CONV_BLOCKS {
            return Err(Error::shape(
                "update_running_stats",
                format!("{} layers of statistics", stats.len()),
            ));
        }
        let m = self.config.encoder.bn_momentum;
        for (i, s) in stats.iter().enumerate() {
            for (name, src) in [("bn.running_mean", &s.mean), ("bn.running_var", &s.var)] {
                let buf = self.buffers.get_mut(&block(i, name)).expect("buffer");
                buf.data_mut()
                    .iter_mut()
                    .zip(src)
                    .for_each(|(r, v)| *r = (1.0 - m) * *r + m * v);
            }
        }
        Ok(())
    }

    /// Eval-mode embeddings of a `(B,1,40,98)` batch.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let plane = h * w;
        let d = self.embedding_dim();
        let mut out = Vec::with_capacity(b * d);
        for start in (0..b).step_by(ENCODE_CHUNK) {
            let end = (start + ENCODE_CHUNK).min(b);
            let chunk = Tensor::new(
                vec![end - start, 1, h, w],
                x.data()[start * plane..end * plane].to_vec(),
            )?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let (emb, _) = self.encode_graph(&mut tape, &bound, &chunk, Mode::Eval)?;
            out.extend_from_slice(tape.value(emb).data());
        }
        Tensor::new(vec![b, d], out)
    }

    /// Dummies for the given `N×D` prototypes, or `None` for the baseline.
    pub fn generate_dummies(&self, prototypes: &Tensor) -> Result<Option<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let c = tape.constant(prototypes.clone());
        Ok(self
            .dummies_graph(&mut tape, &bound, c)?
            .map(|v| tape.value(v).clone()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.params.clone();
        for (name, t) in self.buffers.iter() {
            tensors.insert(name, t.clone());
        }
        Checkpoint {
            meta: self.config.to_meta(),
            tensors,
        }
    }

    /// Rebuilds a model; every expected tensor must be present with the
    /// expected shape.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_meta(&ck.meta)?;
        let mut model = Model::new(config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let fill = |store: &mut ParamStore| -> Result<()> {
            let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
            for name in names {
                let src = ck
                    .tensors
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
                let dst = store.get_mut(&name).expect("known name");
                if src.shape() != dst.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        dst.shape()
                    )));
                }
                *dst = src.clone();
            }
            Ok(())
        };
        fill(&mut model.params)?;
        fill(&mut model.buffers)?;
        if ck.tensors.len() != model.params.len() + model.buffers.len() {
            return Err(Error::Checkpoint(
                "checkpoint holds unexpected tensors".into(),
            ));
        }
        Ok(model)
    }
}
