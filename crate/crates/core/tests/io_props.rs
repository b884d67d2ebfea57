use grformer::io::checkpoint::Checkpoint;
use grformer::io::config::RunConfig;
use grformer::io::pgm::{decode_pgm, encode_pgm};
use grformer::network::NetworkConfig;
use grformer::params::ParamStore;
use grformer::{Error, Tensor};
use proptest::prelude::*;

fn raw_pgm(w: usize, h: usize, header_gap: &str, pixels: &[u8]) -> Vec<u8> {
    let mut b = format!("P5{header_gap}{w} {h}\n255\n").into_bytes();
    b.extend_from_slice(pixels);
    b
}

proptest! {
    #[test]
    fn pgm_bytes_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..w * h).map(|k| (seed.wrapping_mul(k as u64 + 1) >> 13) as u8).collect();
        let bytes = raw_pgm(w, h, "\n", &pixels);
        let t = decode_pgm(&bytes).unwrap();
        prop_assert_eq!(t.shape(), &[h, w]);
        prop_assert_eq!(encode_pgm(&t).unwrap(), bytes);
    }

    #[test]
    fn comments_do_not_change_the_image(w in 1usize..8, h in 1usize..8, comment in "[ -~]{0,20}") {
        let pixels: Vec<u8> = (0..w * h).map(|k| (k * 29 % 256) as u8).collect();
        let plain = decode_pgm(&raw_pgm(w, h, "\n", &pixels)).unwrap();
        let commented = decode_pgm(&raw_pgm(w, h, &format!("\n#{comment}\n"), &pixels)).unwrap();
        prop_assert_eq!(plain, commented);
    }

    #[test]
    fn truncated_payload_is_a_format_error(w in 1usize..8, h in 1usize..8, cut in 1usize..64) {
        let pixels = vec![7u8; w * h];
        let full = raw_pgm(w, h, "\n", &pixels);
        let keep = full.len() - cut.min(w * h);
        let is_format_error = matches!(decode_pgm(&full[..keep]), Err(Error::Format { .. }));
        prop_assert!(is_format_error);
    }

    #[test]
    fn encode_quantizes_by_rounding(v in 0.0f64..=1.0) {
        let t = decode_pgm(&encode_pgm(&Tensor::full(&[1, 1], v)).unwrap()).unwrap();
        prop_assert_eq!(t.data()[0], (v * 255.0).round() / 255.0);
    }

    #[test]
    fn config_text_round_trips(steps in 0usize..10_000, lr in 1e-8f64..1.0, seed in any::<u64>(), blocks in 1usize..6) {
        let cfg = RunConfig { steps, learning_rate: lr, seed, image_size: 8 * blocks, ..RunConfig::default() };
        let parsed = RunConfig::parse_str(&cfg.to_text()).unwrap();
        prop_assert_eq!(parsed.to_text(), cfg.to_text());
        prop_assert_eq!(parsed.learning_rate, lr);
    }

    #[test]
    fn unknown_keys_name_their_line(blank in 0usize..5) {
        let text = format!("{}steps = 3\nbanana = 1\n", "\n".repeat(blank));
        match RunConfig::parse_str(&text) {
            Err(Error::Config { line, .. }) => prop_assert_eq!(line, blank + 2),
            other => prop_assert!(false, "unexpected {:?}", other),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_truncation(values in prop::collection::vec(-1e6f64..1e6, 1..40), cut in 1usize..200) {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::new(&[values.len()], values.clone()).unwrap()).unwrap();
        params.insert("b", Tensor::full(&[2, 3], -0.25)).unwrap();
        let ck = Checkpoint { net: NetworkConfig::default(), extractor_seed: 3, params };
        let bytes = ck.to_bytes();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes.clone());
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(Checkpoint::from_bytes(&bytes[..keep]).is_err());
    }
}
