use ctsae::model::{cls_fusion, downsample, upsample, BranchState, Cls};
use ctsae::nn::Graph;
use ctsae::{Ctsae, ModelConfig};
use ctsae_tensor::{BatchNormMode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The block equations written out one sub-step at a time.
pub fn hand_block(g: &mut Graph<'_, f64>, model: &Ctsae<f64>, index: usize, x_c: &[Var], x_t: &[Var], cls: Var) -> (Vec<Var>, Vec<Var>, Var) {
    let cfg = model.config();
    let block = &model.net.encoder.blocks[index];
    let t = cfg.tokens();
    let mut maps = Vec::new();
    let mut hat_t = Vec::new();
    for (j, bb) in block.branches.iter().enumerate() {
        let m = bb.pre.unwrap().forward(g, x_c[j]).unwrap();
        let x_d = downsample(g, &bb.bridge.unwrap(), m, cfg.token_grid).unwrap();
        hat_t.push(g.tape.add(x_d, x_t[j]).unwrap());
        maps.push(m);
    }
    let fused = cls_fusion(g, block.fusion.as_ref().unwrap(), cfg.heads, cls, &hat_t).unwrap();
    let (mut out_c, mut out_t, mut cls_out) = (Vec::new(), Vec::new(), Vec::new());
    for (j, bb) in block.branches.iter().enumerate() {
        let seq = g.tape.concat(&[fused, hat_t[j]], 1).unwrap();
        let y = bb.attn.unwrap().forward(g, seq).unwrap();
        cls_out.push(g.tape.narrow(y, 1, 0, 1).unwrap());
        let y_t = g.tape.narrow(y, 1, 1, t).unwrap();
        let up = upsample(g, &bb.bridge.unwrap(), y_t, cfg.token_grid, block.plan.out_size).unwrap();
        let hat_c = g.tape.add(up, maps[j]).unwrap();
        out_c.push(bb.fuse.unwrap().forward(g, hat_c).unwrap());
        out_t.push(y_t);
    }
    let sum = g.tape.add_all(&cls_out).unwrap();
    let mean = g.tape.scale(sum, 1.0 / cls_out.len() as f64);
    (out_c, out_t, mean)
}

/// Largest deviation between encoder block `index` of a randomly
/// parameterized model and [`hand_block`], over the conv maps, the
/// tokens and the merged CLS.
pub fn composition_gap(cfg: &ModelConfig, index: usize, seed: u64) -> f64 {
    let mut model = Ctsae::<f64>::new(cfg.clone(), seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    for (_, t) in model.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
    }
    let net = model.net.clone();
    let plan = net.encoder.blocks[index].plan;
    let (n, b) = (2, cfg.branches());
    let random = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::<f64>::uniform(shape.to_vec(), 1.0, r);
    let xc: Vec<Tensor<f64>> = (0..b).map(|_| random(&[n, plan.in_channels, plan.in_size, plan.in_size], &mut r)).collect();
    let xt: Vec<Tensor<f64>> = (0..b).map(|_| random(&[n, cfg.tokens(), cfg.enc_embed], &mut r)).collect();
    let c0 = random(&[n, 1, cfg.enc_embed], &mut r);

    let snapshot = model.clone();
    let mut g = model.params.graph(BatchNormMode::Train, false);
    let xc_v: Vec<Var> = xc.into_iter().map(|t| g.input(t)).collect();
    let xt_v: Vec<Var> = xt.into_iter().map(|t| g.input(t)).collect();
    let cls_v = g.input(c0);
    let mut states: Vec<BranchState> = (0..b).map(|j| BranchState { x_c: Some(xc_v[j]), x_t: Some(xt_v[j]) }).collect();
    let mut cls = Cls::Shared(cls_v);
    net.encoder.blocks[index].forward(&mut g, &mut states, &mut cls).unwrap();
    let (hc, ht, hcls) = hand_block(&mut g, &snapshot, index, &xc_v, &xt_v, cls_v);

    let diff = |g: &Graph<'_, f64>, a: Var, b: Var| {
        assert_eq!(g.shape(a), g.shape(b));
        g.value(a).data().iter().zip(g.value(b).data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let mut gap: f64 = 0.0;
    for j in 0..b {
        let out_c = states[j].x_c.unwrap();
        assert_eq!(g.shape(out_c), vec![n, plan.out_channels, plan.out_size, plan.out_size]);
        gap = gap.max(diff(&g, out_c, hc[j])).max(diff(&g, states[j].x_t.unwrap(), ht[j]));
    }
    let Cls::Shared(c) = cls else { panic!("shared CLS expected") };
    gap.max(diff(&g, c, hcls))
}
