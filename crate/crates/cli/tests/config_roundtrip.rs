use std::path::{Path, PathBuf};

use proptest::prelude::*;
use tcgan::training::Precision;
use tcgan_cli::CliConfig;

fn path() -> impl Strategy<Value = Option<PathBuf>> {
    proptest::option::of("[a-z][a-z0-9_/]{0,12}\\.png".prop_map(PathBuf::from))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn emit_then_parse_is_identity(
        stages in 2usize..9,
        iters in 1usize..5000,
        gamma in 0.0f64..100.0,
        r in 0.01f64..3.0,
        max_size in proptest::option::of(32usize..2048),
        lr in 1e-6f64..0.1,
        beta1 in 0.0f64..0.99,
        dropout in 0.0f64..0.9,
        critic_norm in any::<bool>(),
        seed in any::<u64>(),
        f64_precision in any::<bool>(),
        deterministic in any::<bool>(),
        image in path(),
        mask in path(),
        samples in 0usize..100,
        feather in 0usize..10,
        sr_target in proptest::option::of(16usize..4096),
    ) {
        let mut c = CliConfig::default();
        c.train.stages = stages;
        c.train.iters = iters;
        c.train.gamma = gamma;
        c.train.r = r;
        c.train.max_size = max_size;
        c.train.lr = lr;
        c.train.beta1 = beta1;
        c.train.dropout = dropout;
        c.train.critic_norm = critic_norm;
        c.train.seed = seed;
        c.train.precision = if f64_precision { Precision::F64 } else { Precision::F32 };
        c.train.deterministic = deterministic;
        c.image = image;
        c.mask = mask;
        c.samples = samples;
        c.feather = feather;
        c.sr_target = sr_target;
        let text = c.emit();
        let back = CliConfig::parse(&text, Path::new("generated.cfg")).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.emit(), text);
    }
}
