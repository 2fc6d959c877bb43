use fedsparse::dataset::{generate, Dataset, SceneSpec};
use fedsparse::detector::build_model;
use fedsparse::federation::{ClientState, ClientUpdate, LocalTraining, Method, ServerState, Simulation};
use fedsparse::sparsifier::{prune_report, SparseMask, SparsityRate};
use fedsparse::training::EvalSettings;
use fedsparse::{DetectorConfig, LossConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_detector() -> DetectorConfig {
    DetectorConfig { channel_widths: vec![4, 8], input_size: (16, 16), ..Default::default() }
}

pub fn random_update(id: usize, seed: u64) -> ClientUpdate {
    let mut m = build_model(&small_detector(), seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for slot in m.slots() {
        for v in m.get_mut(slot).data_mut() {
            *v = r.gen_range(-2.0..2.0);
        }
    }
    let mask = SparseMask::ones(&m);
    let report = prune_report(&mask, &m).unwrap();
    ClientUpdate { client_id: id, params: m, mask, loss_trace: vec![], report, num_samples: 1 }
}

pub fn rates(v: &[f64]) -> Vec<SparsityRate> {
    v.iter().map(|&s| SparsityRate::new(s).unwrap()).collect()
}

pub fn data(count: usize, size: usize, seed: u64) -> Dataset {
    let spec = SceneSpec { image_size: (size, size), seed, ..SceneSpec::default() };
    Dataset::new(generate(&spec, count).unwrap(), 4, 3).unwrap()
}

pub fn client(id: usize, s: f64, partition: Vec<usize>, epochs: usize, batch: usize) -> ClientState {
    ClientState {
        id,
        sparsity: SparsityRate::new(s).unwrap(),
        partition,
        learning_rate: 0.01,
        local_epochs: epochs,
        batch_size: batch,
        retained_mask: None,
    }
}

pub fn simulation<'a>(method: Method, s: [f64; 3], train: &'a Dataset, test: &'a Dataset, parallel: bool) -> Simulation<'a> {
    let clients = (0..3).map(|k| client(k, s[k], (k * 20..(k + 1) * 20).collect(), 1, 10)).collect();
    Simulation {
        server: ServerState { global: build_model(&small_detector(), 5).unwrap(), round: 0, sampling_fraction: 1.0, seed: 11 },
        clients,
        method,
        training: LocalTraining { loss: LossConfig::default(), lambda: 1e-4, sparse: method.is_sparse() },
        eval: EvalSettings::default(),
        train_data: train,
        test_data: test,
        parallel,
        cumulative_bytes: 0,
    }
}
