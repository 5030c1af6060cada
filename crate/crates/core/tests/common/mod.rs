#![allow(dead_code)]

use fisherlens_core::toynet::{
    generate_dataset, init_adapters, train_adapters, AdapterConfig, DataRole, Dataset, Generator, LayerAdapters,
    ToyNetwork, ToyNetworkConfig,
};
use fisherlens_core::LayerComponentScores;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random solver instance and budget. A third of the instances draw Fisher
/// values from a coarse grid so ties are common.
pub fn instance(seed: u64, max_heads: usize, max_neurons: usize) -> (LayerComponentScores, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nh = rng.random_range(1..=max_heads);
    let nf = rng.random_range(1..=max_neurons);
    let coarse = rng.random_range(0..3) == 0;
    let draw = |rng: &mut ChaCha8Rng| {
        if coarse {
            rng.random_range(0..4) as f64 * 0.25
        } else {
            rng.random::<f64>()
        }
    };
    let heads: Vec<f64> = (0..nh).map(|_| draw(&mut rng)).collect();
    let neurons: Vec<f64> = (0..nf).map(|_| draw(&mut rng)).collect();
    let th = rng.random_range(0.1..2.0);
    let tf = if rng.random_range(0..4) == 0 { th } else { rng.random_range(0.1..2.0) };
    let s = LayerComponentScores::new(0, heads, neurons, th, tf).unwrap();
    let c = rng.random_range(0.0..1.2) * s.total_taylor_mass();
    (s, c)
}

pub fn net(seed: u64, layers: usize, dim: usize) -> ToyNetwork {
    ToyNetwork::new(ToyNetworkConfig { num_layers: layers, model_dim: dim, num_heads: 4, ffn_dim: 8, seed }).unwrap()
}

pub fn task(seed: u64, size: usize, dim: usize) -> Dataset {
    generate_dataset(Generator::LinearTeacher, seed, seed.wrapping_add(1000), size, dim, DataRole::Task).unwrap()
}

pub fn pretrain(seed: u64, size: usize, dim: usize) -> Dataset {
    generate_dataset(Generator::RandomGaussian, seed, seed.wrapping_add(2000), size, dim, DataRole::Pretrain).unwrap()
}

/// Adapters on every layer, trained briefly so they are not at their zero
/// initialisation.
pub fn trained_adapters(net: &ToyNetwork, data: &Dataset, seed: u64, steps: usize) -> Vec<LayerAdapters> {
    let all: Vec<usize> = (0..net.num_layers()).collect();
    let init = init_adapters(net, &AdapterConfig { seed, ..Default::default() }, &all).unwrap();
    train_adapters(net, &init, data, steps, 1e-2, &all).unwrap().adapters
}
