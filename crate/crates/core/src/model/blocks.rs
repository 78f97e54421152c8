//! Reusable layer groups: convolution + batch-norm (+ ReLU), bottlenecks.

use crate::nn::{BnRef, Graph, Init, NodeId, ParamId, ParamStore};

/// Convolution without bias followed by batch normalisation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub bn: BnRef,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBn {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, seed: u64) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            [cout, cin, k, k],
            Init::Kaiming { fan_in: cin * k * k },
            true,
            seed,
        );
        let bn = batch_norm(store, &format!("{name}.bn"), cout, seed);
        ConvBn { weight, bn, stride, pad: k / 2 }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId, training: bool, relu: bool) -> NodeId {
        let y = g.conv2d(store, x, self.weight, None, self.stride, self.pad);
        let y = g.batch_norm(store, y, &self.bn, training);
        if relu {
            g.relu(y)
        } else {
            y
        }
    }
}

pub fn batch_norm(store: &mut ParamStore, name: &str, channels: usize, seed: u64) -> BnRef {
    let gamma = store.add(&format!("{name}.gamma"), [1, 1, 1, channels], Init::Constant(1.0), false, seed);
    let beta = store.add(&format!("{name}.beta"), [1, 1, 1, channels], Init::Constant(0.0), false, seed);
    store.add_buffer(&format!("{name}.running_mean"), vec![0.0; channels]);
    store.add_buffer(&format!("{name}.running_var"), vec![1.0; channels]);
    BnRef { gamma, beta, name: name.to_string() }
}

/// Convolution with bias and no normalisation, used by the output heads.
#[derive(Clone, Debug)]
pub struct HeadConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl HeadConv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, seed: u64) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add(
            &format!("{name}.weight"),
            [cout, cin, k, k],
            Init::Normal { std: (1.0 / fan_in as f32).sqrt() },
            true,
            seed,
        );
        let bias = store.add(&format!("{name}.bias"), [1, 1, 1, cout], Init::Constant(0.0), false, seed);
        HeadConv { weight, bias, pad: k / 2 }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        g.conv2d(store, x, self.weight, Some(self.bias), 1, self.pad)
    }
}

/// Residual bottleneck (1x1 reduce, 3x3, 1x1 expand) with the stride on the
/// 3x3 convolution and a projection shortcut when the shape changes.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    reduce: ConvBn,
    spatial: ConvBn,
    expand: ConvBn,
    shortcut: Option<ConvBn>,
}

impl Bottleneck {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, mid: usize, cout: usize, stride: usize, seed: u64) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(store, &format!("{name}.down"), cin, cout, 1, stride, seed));
        Bottleneck {
            reduce: ConvBn::new(store, &format!("{name}.conv1"), cin, mid, 1, 1, seed),
            spatial: ConvBn::new(store, &format!("{name}.conv2"), mid, mid, 3, stride, seed),
            expand: ConvBn::new(store, &format!("{name}.conv3"), mid, cout, 1, 1, seed),
            shortcut,
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId, training: bool) -> NodeId {
        let y = self.reduce.apply(g, store, x, training, true);
        let y = self.spatial.apply(g, store, y, training, true);
        let y = self.expand.apply(g, store, y, training, false);
        let s = match &self.shortcut {
            Some(sc) => sc.apply(g, store, x, training, false),
            None => x,
        };
        let sum = g.add(y, s);
        g.relu(sum)
    }
}
