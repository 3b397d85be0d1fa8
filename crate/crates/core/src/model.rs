//! Twin MLP networks. Each network is a two-layer ReLU feature extractor
//! (`theta`), a linear classification head (`phi`) and a linear projection
//! head (`psi`) whose output is L2-normalised. Both heads read the final
//! hidden representation.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndkernel::{self, GradientTape, KernelError, Matrix, Var};
use crate::rng::{substream, tags};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("input has {got} features, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

/// Layer widths. Fully determines every parameter shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0
            || self.hidden_dim == 0
            || self.num_classes == 0
            || self.embed_dim == 0
        {
            return Err(ModelError::Architecture(format!(
                "all dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Shapes in [`PARAM_NAMES`] order.
    pub fn param_shapes(&self) -> [(usize, usize); 8] {
        let (d, h, c, e) = (
            self.input_dim,
            self.hidden_dim,
            self.num_classes,
            self.embed_dim,
        );
        [
            (d, h),
            (1, h),
            (h, h),
            (1, h),
            (h, c),
            (1, c),
            (h, e),
            (1, e),
        ]
    }
}

pub const PARAM_NAMES: [&str; 8] = [
    "theta.w1", "theta.b1", "theta.w2", "theta.b2", "phi.w", "phi.b", "psi.w", "psi.b",
];

/// Indices into [`PARAM_NAMES`] for the projection head.
pub const PROJECTION_PARAMS: std::ops::Range<usize> = 6..8;

/// Parameters of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    arch: Architecture,
    seed: u64,
    params: [Matrix; 8],
}

impl NetworkParams {
    /// Fan-in scaled uniform weights, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// and zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = substream(seed, &[tags::INIT]);
        let params = arch.param_shapes().map(|(rows, cols)| {
            if rows == 1 {
                Matrix::zeros(rows, cols)
            } else {
                let bound = 1.0 / (rows as f64).sqrt();
                let mut m = Matrix::zeros(rows, cols);
                for v in m.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
                m
            }
        });
        Ok(NetworkParams { arch, seed, params })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Matrix; 8] {
        &self.params
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 8] {
        self.params.each_mut()
    }

    fn check_input(&self, x: &Matrix) -> Result<(), ModelError> {
        if x.cols() != self.arch.input_dim {
            return Err(ModelError::InputWidth {
                expected: self.arch.input_dim,
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Final hidden representation `f(x; theta)`.
    pub fn features(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        self.check_input(x)?;
        let p = &self.params;
        let h1 = ndkernel::matmul(x, &p[0])?.add_row_bias(&p[1])?.map(relu);
        let h2 = ndkernel::matmul(&h1, &p[2])?.add_row_bias(&p[3])?.map(relu);
        Ok(h2)
    }

    pub fn forward_logits(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        let h = self.features(x)?;
        Ok(ndkernel::matmul(&h, &self.params[4])?.add_row_bias(&self.params[5])?)
    }

    pub fn forward_softmax(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        Ok(ndkernel::softmax_rows(&self.forward_logits(x)?))
    }

    /// Unit-norm embeddings `g(f(x; theta); psi)`.
    pub fn forward_projection(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        let h = self.features(x)?;
        let z = ndkernel::matmul(&h, &self.params[6])?.add_row_bias(&self.params[7])?;
        Ok(ndkernel::l2_normalize_rows(&z)?)
    }

    /// Registers every parameter on `tape`.
    pub fn record(&self, tape: &mut GradientTape) -> NetworkVars {
        NetworkVars {
            vars: self.params.clone().map(|m| tape.parameter(m)),
        }
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Tape handles for one network's parameters.
#[derive(Clone, Copy, Debug)]
pub struct NetworkVars {
    pub vars: [Var; 8],
}

impl NetworkVars {
    pub fn features(&self, tape: &mut GradientTape, x: Var) -> Result<Var, KernelError> {
        let v = &self.vars;
        let a = tape.matmul(x, v[0])?;
        let a = tape.add_row_bias(a, v[1])?;
        let h1 = tape.relu(a)?;
        let b = tape.matmul(h1, v[2])?;
        let b = tape.add_row_bias(b, v[3])?;
        tape.relu(b)
    }

    pub fn logits(&self, tape: &mut GradientTape, hidden: Var) -> Result<Var, KernelError> {
        let z = tape.matmul(hidden, self.vars[4])?;
        tape.add_row_bias(z, self.vars[5])
    }

    pub fn projection(&self, tape: &mut GradientTape, hidden: Var) -> Result<Var, KernelError> {
        let z = tape.matmul(hidden, self.vars[6])?;
        let z = tape.add_row_bias(z, self.vars[7])?;
        tape.l2_normalize_rows(z)
    }
}

/// Which network of the pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetId {
    First,
    Second,
}

impl NetId {
    pub const BOTH: [NetId; 2] = [NetId::First, NetId::Second];

    pub fn other(self) -> NetId {
        match self {
            NetId::First => NetId::Second,
            NetId::Second => NetId::First,
        }
    }

    pub fn index(self) -> usize {
        match self {
            NetId::First => 0,
            NetId::Second => 1,
        }
    }
}

/// Two networks with a shared architecture and independent parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinNetworks {
    pub net1: NetworkParams,
    pub net2: NetworkParams,
}

impl TwinNetworks {
    /// Each network gets its own seed derived from `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        Ok(TwinNetworks {
            net1: NetworkParams::init(arch, crate::rng::derive_seed(seed, &[1]))?,
            net2: NetworkParams::init(arch, crate::rng::derive_seed(seed, &[2]))?,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.net1.arch
    }

    pub fn get(&self, id: NetId) -> &NetworkParams {
        match id {
            NetId::First => &self.net1,
            NetId::Second => &self.net2,
        }
    }

    pub fn get_mut(&mut self, id: NetId) -> &mut NetworkParams {
        match id {
            NetId::First => &mut self.net1,
            NetId::Second => &mut self.net2,
        }
    }

    /// Elementwise mean of the two networks' softmax outputs.
    pub fn ensemble_softmax(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        let a = self.net1.forward_softmax(x)?;
        let b = self.net2.forward_softmax(x)?;
        Ok(a.add(&b)?.scale(0.5))
    }

    // Layout (little endian):
    //   magic "UNCTWIN\0", version u32, input/hidden/classes/embed as u64,
    //   then per network: seed u64, param count u32, and per parameter
    //   name (u32 length + utf8), rows u64, cols u64, rows*cols f64.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let a = self.arch();
        for dim in [a.input_dim, a.hidden_dim, a.num_classes, a.embed_dim] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for net in [&self.net1, &self.net2] {
            w.write_all(&net.seed.to_le_bytes())?;
            w.write_all(&(PARAM_NAMES.len() as u32).to_le_bytes())?;
            for (name, m) in PARAM_NAMES.iter().zip(&net.params) {
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&(m.rows() as u64).to_le_bytes())?;
                w.write_all(&(m.cols() as u64).to_le_bytes())?;
                for v in m.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("wrong magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u64(&mut r)? as usize;
        }
        let arch = Architecture {
            input_dim: dims[0],
            hidden_dim: dims[1],
            num_classes: dims[2],
            embed_dim: dims[3],
        };
        arch.validate()?;
        let shapes = arch.param_shapes();
        let load_net = |r: &mut R| -> Result<NetworkParams, ModelError> {
            let seed = read_u64(r)?;
            let count = read_u32(r)? as usize;
            if count != PARAM_NAMES.len() {
                return Err(ModelError::Checkpoint(format!(
                    "expected 8 parameters, found {count}"
                )));
            }
            let mut params: [Matrix; 8] = Default::default();
            for (slot, (name, shape)) in params.iter_mut().zip(PARAM_NAMES.iter().zip(shapes)) {
                let len = read_u32(r)? as usize;
                let mut buf = vec![0u8; len];
                r.read_exact(&mut buf)?;
                if buf != name.as_bytes() {
                    return Err(ModelError::Checkpoint(format!(
                        "expected parameter {name}, found {:?}",
                        String::from_utf8_lossy(&buf)
                    )));
                }
                let rows = read_u64(r)? as usize;
                let cols = read_u64(r)? as usize;
                if (rows, cols) != shape {
                    return Err(ModelError::Checkpoint(format!(
                        "{name} is {rows}x{cols}, architecture wants {}x{}",
                        shape.0, shape.1
                    )));
                }
                let mut data = Vec::with_capacity(rows * cols);
                let mut b = [0u8; 8];
                for _ in 0..rows * cols {
                    r.read_exact(&mut b)?;
                    data.push(f64::from_le_bytes(b));
                }
                *slot = Matrix::new(rows, cols, data)?;
            }
            Ok(NetworkParams { arch, seed, params })
        };
        let net1 = load_net(&mut r)?;
        let net2 = load_net(&mut r)?;
        Ok(TwinNetworks { net1, net2 })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"UNCTWIN\0";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
