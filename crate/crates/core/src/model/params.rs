use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::autodiff::{NodeId, ParamId, ParamStore, Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

/// Self-attention + FFN, used by the image encoder and the fusion step.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Block {
    pub attn: Attention,
    pub norm1: Norm,
    pub ffn: Ffn,
    pub norm2: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct StreamLayer {
    pub self_attn: Attention,
    pub norm1: Norm,
    pub cross: Attention,
    pub norm2: Norm,
    pub ffn: Ffn,
    pub norm3: Norm,
}

#[derive(Clone, Debug)]
pub(crate) struct Stream {
    pub layers: Vec<StreamLayer>,
    pub fuse: Block,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub image_in: Linear,
    pub image: Vec<Block>,
    pub position: ParamId,
    pub embed: ParamId,
    pub trace_in: Linear,
    pub caption: Stream,
    pub trace: Stream,
}

enum Init {
    Xavier,
    Zeros,
    Ones,
    Sinusoid,
}

struct Builder<'a, F> {
    store: ParamStore,
    make: &'a mut F,
}

impl<F> Builder<'_, F>
where
    F: FnMut(&str, &[usize], Init) -> Result<Tensor, ModelError>,
{
    fn tensor(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId, ModelError> {
        let t = (self.make)(&name, shape, init)?;
        Ok(self.store.insert(name, t))
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Result<Linear, ModelError> {
        Ok(Linear {
            w: self.tensor(format!("{prefix}.w"), &[d_in, d_out], Init::Xavier)?,
            b: self.tensor(format!("{prefix}.b"), &[d_out], Init::Zeros)?,
        })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<Norm, ModelError> {
        Ok(Norm {
            gamma: self.tensor(format!("{prefix}.gamma"), &[d], Init::Ones)?,
            beta: self.tensor(format!("{prefix}.beta"), &[d], Init::Zeros)?,
        })
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Result<Attention, ModelError> {
        Ok(Attention {
            q: self.linear(&format!("{prefix}.q"), d, d)?,
            k: self.linear(&format!("{prefix}.k"), d, d)?,
            v: self.linear(&format!("{prefix}.v"), d, d)?,
            o: self.linear(&format!("{prefix}.o"), d, d)?,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> Result<Ffn, ModelError> {
        Ok(Ffn {
            up: self.linear(&format!("{prefix}.up"), d, hidden)?,
            down: self.linear(&format!("{prefix}.down"), hidden, d)?,
        })
    }

    fn block(&mut self, prefix: &str, c: &ModelConfig) -> Result<Block, ModelError> {
        Ok(Block {
            attn: self.attention(&format!("{prefix}.attn"), c.d_model)?,
            norm1: self.norm(&format!("{prefix}.norm1"), c.d_model)?,
            ffn: self.ffn(&format!("{prefix}.ffn"), c.d_model, c.d_ffn)?,
            norm2: self.norm(&format!("{prefix}.norm2"), c.d_model)?,
        })
    }

    fn stream(&mut self, name: &str, c: &ModelConfig, d_out: usize) -> Result<Stream, ModelError> {
        let d = c.d_model;
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = format!("{name}.{l}");
            layers.push(StreamLayer {
                self_attn: self.attention(&format!("{p}.self"), d)?,
                norm1: self.norm(&format!("{p}.norm1"), d)?,
                cross: self.attention(&format!("{p}.cross"), d)?,
                norm2: self.norm(&format!("{p}.norm2"), d)?,
                ffn: self.ffn(&format!("{p}.ffn"), d, c.d_ffn)?,
                norm3: self.norm(&format!("{p}.norm3"), d)?,
            });
        }
        Ok(Stream {
            layers,
            fuse: self.block(&format!("{name}.fuse"), c)?,
            out: self.linear(&format!("{name}.out"), d, d_out)?,
        })
    }
}

fn build<F>(config: &ModelConfig, mut make: F) -> Result<(ParamStore, Layout), ModelError>
where
    F: FnMut(&str, &[usize], Init) -> Result<Tensor, ModelError>,
{
    let c = config;
    let d = c.d_model;
    let mut b = Builder {
        store: ParamStore::new(),
        make: &mut make,
    };
    let image_in = b.linear("image.in", c.d_visual, d)?;
    let image = (0..c.n_layers)
        .map(|l| b.block(&format!("image.{l}"), c))
        .collect::<Result<Vec<_>, _>>()?;
    let position = b.tensor("position".into(), &[c.positions(), d], Init::Sinusoid)?;
    let embed = b.tensor("caption.embed".into(), &[c.vocab_size, d], Init::Xavier)?;
    let caption = b.stream("caption", c, c.vocab_size)?;
    let trace_in = b.linear("trace.in", 5, d)?;
    let trace = b.stream("trace", c, 5)?;
    let layout = Layout {
        image_in,
        image,
        position,
        embed,
        trace_in,
        caption,
        trace,
    };
    Ok((b.store, layout))
}

fn sinusoid(rows: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; rows * d];
    for p in 0..rows {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = p as f64 * freq;
            data[p * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::matrix(rows, d, data).expect("shape matches")
}

/// The single parameter set shared by every task.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    pub(crate) layout: Layout,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, unit norm gains and a sinusoidal
    /// start for the learned position table.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, layout) = build(&config, |_, shape, init| {
            Ok(match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::filled(shape, 1.0),
                Init::Sinusoid => sinusoid(shape[0], shape[1]),
                Init::Xavier => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
                    Tensor::new(shape.to_vec(), data)?
                }
            })
        })?;
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    /// Adopts an existing store, which must hold exactly the parameters the
    /// config calls for, in layout order.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        if store.is_empty() {
            return Err(ModelError::Input("empty parameter store".into()));
        }
        let mut next = store.ids();
        let (expected, layout) = build(&config, |name, shape, _| {
            let id = next
                .next()
                .ok_or_else(|| ModelError::Input(format!("missing parameter {name}")))?;
            let (got_name, t) = (store.name(id), store.get(id));
            if got_name != name || t.shape() != shape {
                return Err(ModelError::Input(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        })?;
        if expected.len() != store.len() {
            return Err(ModelError::Input(format!(
                "{} parameters present, {} expected",
                store.len(),
                expected.len()
            )));
        }
        Ok(Self {
            config,
            store: expected,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        Bound {
            params: self,
            nodes: tape.bind(&self.store),
        }
    }

    /// Wraps nodes produced by an earlier `tape.bind(self.store())`.
    pub fn bound(&self, nodes: &[NodeId]) -> Bound<'_> {
        assert_eq!(nodes.len(), self.store.len(), "bound node count");
        Bound {
            params: self,
            nodes: nodes.to_vec(),
        }
    }
}

/// Parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound<'a> {
    pub params: &'a ModelParams,
    nodes: Vec<NodeId>,
}

impl Bound<'_> {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_mirrored() {
        let p = ModelParams::init(ModelConfig::desk(9, 6), 0).unwrap();
        let s = p.store();
        let shapes = |prefix: &str| -> Vec<(String, Vec<usize>)> {
            s.iter()
                .filter(|(_, n, _)| n.starts_with(prefix))
                .map(|(_, n, t)| (n[prefix.len()..].to_string(), t.shape().to_vec()))
                .collect()
        };
        let cap = shapes("caption.");
        let tr = shapes("trace.");
        let cap_core: Vec<_> = cap
            .iter()
            .filter(|(n, _)| !n.starts_with("out") && n != "embed")
            .collect();
        let tr_core: Vec<_> = tr
            .iter()
            .filter(|(n, _)| !n.starts_with("out") && !n.starts_with("in"))
            .collect();
        assert_eq!(cap_core, tr_core);
        assert!(cap.contains(&("out.w".into(), vec![32, 9])));
        assert!(tr.contains(&("out.w".into(), vec![32, 5])));
        assert!(tr.contains(&("in.w".into(), vec![5, 32])));
    }

    #[test]
    fn from_store_round_trips_and_rejects_mismatch() {
        let c = ModelConfig::desk(9, 6);
        let p = ModelParams::init(c.clone(), 3).unwrap();
        let q = ModelParams::from_store(c.clone(), p.store().clone()).unwrap();
        assert_eq!(p.checksum(), q.checksum());
        let mut other = c;
        other.n_layers = 2;
        assert!(ModelParams::from_store(other, p.store().clone()).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::desk(9, 6);
        let a = ModelParams::init(c.clone(), 1).unwrap();
        let b = ModelParams::init(c.clone(), 1).unwrap();
        let d = ModelParams::init(c, 2).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), d.checksum());
    }
}
