//! Temporal stage: two stacked 16-unit LSTM layers over the 32 per-frame
//! descriptors of a clip, followed by a time-distributed 16-16-1 head that
//! emits one intensity per timestep. Gate activations are hard sigmoids
//! (clamp(0.2x + 0.5, 0, 1)); candidate and output activations are tanh;
//! initial states are zero.

use rand_chacha::ChaCha8Rng;

use crate::bilinear::DESCRIPTOR_DIM;
use crate::error::{Error, Result};
use crate::nn::{Head, Mode};
use crate::params::{full_var, uniform_init, Param, ParamSet};
use crate::rng::{derive_rng, tag};
use crate::tensor::Tensor;

pub const SEQ_LEN: usize = 32;
pub const LSTM_UNITS: usize = 16;
pub const TD_HIDDEN: usize = 16;
pub const TD_DROPOUT: f64 = 0.3;
const INIT_LIMIT: f64 = 0.1;

pub struct LstmLayer {
    // input weights [in_dim, units], recurrent weights [units, units],
    // biases [units]; forget gate bias starts at 1.0.
    wf: Tensor,
    uf: Tensor,
    bf: Tensor,
    wi: Tensor,
    ui: Tensor,
    bi: Tensor,
    wc: Tensor,
    uc: Tensor,
    bc: Tensor,
    wo: Tensor,
    uo: Tensor,
    bo: Tensor,
    name: String,
    in_dim: usize,
    units: usize,
}

impl LstmLayer {
    pub fn init(name: &str, in_dim: usize, units: usize, rng: &mut ChaCha8Rng) -> LstmLayer {
        let w = |rng: &mut ChaCha8Rng| uniform_init(rng, &[in_dim, units], INIT_LIMIT);
        let u = |rng: &mut ChaCha8Rng| uniform_init(rng, &[units, units], INIT_LIMIT);
        let b = |rng: &mut ChaCha8Rng| uniform_init(rng, &[units], INIT_LIMIT);
        LstmLayer {
            wf: w(rng),
            uf: u(rng),
            bf: full_var(&[units], 1.0),
            wi: w(rng),
            ui: u(rng),
            bi: b(rng),
            wc: w(rng),
            uc: u(rng),
            bc: b(rng),
            wo: w(rng),
            uo: u(rng),
            bo: b(rng),
            name: name.to_string(),
            in_dim,
            units,
        }
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn zero_state(&self) -> (Tensor, Tensor) {
        let h = Tensor::zeros(&[1, self.units]).expect("static shape");
        let c = Tensor::zeros(&[1, self.units]).expect("static shape");
        (h, c)
    }

    /// One timestep: x [1, in_dim], (h, c) [1, units] -> (h', c').
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.shape() != vec![1, self.in_dim] {
            return Err(Error::ShapeMismatch {
                op: "lstm step input",
                lhs: x.shape(),
                rhs: vec![1, self.in_dim],
            });
        }
        let gate = |w: &Tensor, u: &Tensor, b: &Tensor| -> Result<Tensor> {
            x.matmul(w)?.add(&h.matmul(u)?)?.add_bias_rows(b)
        };
        let f = gate(&self.wf, &self.uf, &self.bf)?.hard_sigmoid();
        let i = gate(&self.wi, &self.ui, &self.bi)?.hard_sigmoid();
        let g = gate(&self.wc, &self.uc, &self.bc)?.tanh();
        let o = gate(&self.wo, &self.uo, &self.bo)?.hard_sigmoid();
        let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
        let h_next = o.mul(&c_next.tanh())?;
        Ok((h_next, c_next))
    }

    pub fn params(&self) -> ParamSet {
        let n = |suffix: &str| format!("{}.{}", self.name, suffix);
        ParamSet::new(vec![
            Param { name: n("wf"), tensor: self.wf.clone() },
            Param { name: n("uf"), tensor: self.uf.clone() },
            Param { name: n("bf"), tensor: self.bf.clone() },
            Param { name: n("wi"), tensor: self.wi.clone() },
            Param { name: n("ui"), tensor: self.ui.clone() },
            Param { name: n("bi"), tensor: self.bi.clone() },
            Param { name: n("wc"), tensor: self.wc.clone() },
            Param { name: n("uc"), tensor: self.uc.clone() },
            Param { name: n("bc"), tensor: self.bc.clone() },
            Param { name: n("wo"), tensor: self.wo.clone() },
            Param { name: n("uo"), tensor: self.uo.clone() },
            Param { name: n("bo"), tensor: self.bo.clone() },
        ])
    }
}

/// Stage-2 network: descriptor sequence [32 x 1024] -> 32 intensities.
pub struct IntensityLstm {
    pub l1: LstmLayer,
    pub l2: LstmLayer,
    pub head: Head,
}

impl IntensityLstm {
    pub fn init(seed: u64) -> IntensityLstm {
        IntensityLstm {
            l1: LstmLayer::init("lstm1", DESCRIPTOR_DIM, LSTM_UNITS, &mut derive_rng(seed, &[tag("lstm_init"), 0])),
            l2: LstmLayer::init("lstm2", LSTM_UNITS, LSTM_UNITS, &mut derive_rng(seed, &[tag("lstm_init"), 1])),
            head: Head::init("td_head", LSTM_UNITS, TD_HIDDEN, &mut derive_rng(seed, &[tag("lstm_init"), 2])),
        }
    }

    /// Run the stack over a descriptor sequence ([1, 1024] per step) and
    /// return one raw [1,1] prediction per step. Inference clamps to [0,7]
    /// at the reporting boundary, not here.
    pub fn forward_seq(&self, xs: &[Tensor], mode: Mode, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument {
                what: "forward_seq",
                reason: "empty sequence".into(),
            });
        }
        let (mut h1, mut c1) = self.l1.zero_state();
        let (mut h2, mut c2) = self.l2.zero_state();
        let mut preds = Vec::with_capacity(xs.len());
        for x in xs {
            let (nh1, nc1) = self.l1.step(x, &h1, &c1)?;
            let (nh2, nc2) = self.l2.step(&nh1, &h2, &c2)?;
            h1 = nh1;
            c1 = nc1;
            h2 = nh2;
            c2 = nc2;
            preds.push(self.head.forward(&h2, TD_DROPOUT, mode, rng)?);
        }
        Ok(preds)
    }

    pub fn params(&self) -> ParamSet {
        let mut v: Vec<Param> = Vec::new();
        v.extend(self.l1.params().iter().cloned());
        v.extend(self.l2.params().iter().cloned());
        v.extend(self.head.params().iter().cloned());
        ParamSet::new(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::no_grad;
    use rand::Rng;

    fn hs(x: f64) -> f64 {
        (0.2 * x + 0.5).clamp(0.0, 1.0)
    }

    /// Scalar-loop reference for one LSTM layer over a sequence.
    #[allow(clippy::too_many_arguments)]
    fn scalar_lstm(
        xs: &[Vec<f64>],
        in_dim: usize,
        units: usize,
        w: [&[f64]; 4], // wf, wi, wc, wo as [in_dim, units]
        u: [&[f64]; 4],
        b: [&[f64]; 4],
    ) -> Vec<Vec<f64>> {
        let mut h = vec![0.0; units];
        let mut c = vec![0.0; units];
        let mut out = Vec::new();
        for x in xs {
            let lin = |wm: &[f64], um: &[f64], bm: &[f64]| -> Vec<f64> {
                (0..units)
                    .map(|j| {
                        let mut s = bm[j];
                        for k in 0..in_dim {
                            s += x[k] * wm[k * units + j];
                        }
                        for k in 0..units {
                            s += h[k] * um[k * units + j];
                        }
                        s
                    })
                    .collect()
            };
            let f: Vec<f64> = lin(w[0], u[0], b[0]).iter().map(|&v| hs(v)).collect();
            let i: Vec<f64> = lin(w[1], u[1], b[1]).iter().map(|&v| hs(v)).collect();
            let g: Vec<f64> = lin(w[2], u[2], b[2]).iter().map(|&v| v.tanh()).collect();
            let o: Vec<f64> = lin(w[3], u[3], b[3]).iter().map(|&v| hs(v)).collect();
            for j in 0..units {
                c[j] = f[j] * c[j] + i[j] * g[j];
                h[j] = o[j] * c[j].tanh();
            }
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn layer_matches_scalar_reference() {
        let mut rng = derive_rng(21, &[tag("lstm_test")]);
        let (in_dim, units, steps) = (8, 4, 6);
        let layer = LstmLayer::init("l", in_dim, units, &mut rng);
        let xs_data: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let xs: Vec<Tensor> = xs_data
            .iter()
            .map(|v| Tensor::new(v.clone(), &[1, in_dim]).unwrap())
            .collect();

        let lib_out: Vec<Vec<f64>> = no_grad(|| {
            let (mut h, mut c) = layer.zero_state();
            let mut out = Vec::new();
            for x in &xs {
                let (nh, nc) = layer.step(x, &h, &c).unwrap();
                out.push(nh.to_vec());
                h = nh;
                c = nc;
            }
            out
        });

        let p = layer.params();
        let gv = |n: &str| p.get(&format!("l.{n}")).unwrap().tensor.to_vec();
        let (wf, wi, wc, wo) = (gv("wf"), gv("wi"), gv("wc"), gv("wo"));
        let (uf, ui, uc, uo) = (gv("uf"), gv("ui"), gv("uc"), gv("uo"));
        let (bf, bi, bc, bo) = (gv("bf"), gv("bi"), gv("bc"), gv("bo"));
        let ref_out = scalar_lstm(
            &xs_data,
            in_dim,
            units,
            [&wf, &wi, &wc, &wo],
            [&uf, &ui, &uc, &uo],
            [&bf, &bi, &bc, &bo],
        );
        for (a, b) in lib_out.iter().zip(&ref_out) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn forget_bias_is_one_other_params_small() {
        let mut rng = derive_rng(3, &[tag("lstm_test")]);
        let layer = LstmLayer::init("l", 4, 3, &mut rng);
        let p = layer.params();
        assert!(p.get("l.bf").unwrap().tensor.to_vec().iter().all(|&v| v == 1.0));
        for name in ["l.wf", "l.uf", "l.bi", "l.bc", "l.bo"] {
            assert!(
                p.get(name).unwrap().tensor.to_vec().iter().all(|&v| v.abs() < 0.1),
                "{name} exceeds init range"
            );
        }
    }

    #[test]
    fn full_stack_emits_one_prediction_per_step() {
        let net = IntensityLstm::init(9);
        let mut rng = derive_rng(10, &[tag("lstm_test")]);
        let xs: Vec<Tensor> = (0..SEQ_LEN)
            .map(|_| {
                let d: Vec<f64> = (0..DESCRIPTOR_DIM).map(|_| rng.gen_range(-0.1..0.1)).collect();
                Tensor::new(d, &[1, DESCRIPTOR_DIM]).unwrap()
            })
            .collect();
        let preds = no_grad(|| net.forward_seq(&xs, Mode::Eval, &mut rng)).unwrap();
        assert_eq!(preds.len(), SEQ_LEN);
        assert!(preds.iter().all(|p| p.shape() == vec![1, 1]));
    }

    #[test]
    fn zero_input_zero_weights_gives_zero_outputs() {
        let net = IntensityLstm::init(4);
        for p in net.params().iter() {
            p.tensor.set_data(&vec![0.0; p.tensor.numel()]);
        }
        let xs: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(&[1, DESCRIPTOR_DIM]).unwrap()).collect();
        let mut rng = derive_rng(5, &[tag("lstm_test")]);
        let preds = no_grad(|| net.forward_seq(&xs, Mode::Eval, &mut rng)).unwrap();
        assert!(preds.iter().all(|p| p.item() == 0.0));
    }

    #[test]
    fn gradients_reach_lstm1_input_weights() {
        let mut rng = derive_rng(6, &[tag("lstm_test")]);
        let net = IntensityLstm::init(11);
        let xs: Vec<Tensor> = (0..3)
            .map(|_| {
                let d: Vec<f64> = (0..DESCRIPTOR_DIM).map(|_| rng.gen_range(-0.5..0.5)).collect();
                Tensor::new(d, &[1, DESCRIPTOR_DIM]).unwrap()
            })
            .collect();
        let preds = net.forward_seq(&xs, Mode::Eval, &mut rng).unwrap();
        let loss = crate::tensor::sum_scalars(
            &preds.iter().map(|p| p.reshape(&[1]).unwrap()).collect::<Vec<_>>(),
        )
        .unwrap()
        .mean()
        .unwrap();
        loss.backward().unwrap();
        let g = net.params().get("lstm1.wf").unwrap().tensor.grad().unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }
}
