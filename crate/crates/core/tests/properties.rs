use frae::bitstream::{
    decode_arith_with, encode_arith_with, pack_fixed, quantize_probs, quantized_bits, unpack_fixed, Mode, StreamHeader, PROB_TOTAL,
};
use frae::dsp::Spectrogram;
use frae::prior::PriorKind;
use frae::schemes::{LatentSequence, Normalizer, SchemeId};
use frae::training::fmt_g6;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn latents(max_levels_log2: u32) -> impl Strategy<Value = LatentSequence> {
    (1usize..6, 1u32..=max_levels_log2, 0usize..20).prop_flat_map(|(d, lb, t)| {
        let k = 1usize << lb;
        proptest::collection::vec(0..k, d * t).prop_map(move |idx| LatentSequence::new(d, k, idx).unwrap())
    })
}

/// Deterministic per-call distributions: the n-th call returns the same
/// table on both sides.
fn table_source(seed: u64, d: usize, k: usize, skew: f64) -> impl FnMut(&[usize]) -> frae::bitstream::Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |_| {
        let mut p: Vec<f64> = (0..d * k).map(|_| (skew * rng.gen_range(-1.0..1.0f64)).exp()).collect();
        for row in p.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(p)
    }
}

proptest! {
    #[test]
    fn quantized_tables_are_complete(raw in proptest::collection::vec(0.0f64..1.0, 2..255)) {
        let s: f64 = raw.iter().sum::<f64>().max(1e-12);
        let probs: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let f = quantize_probs(&probs);
        prop_assert_eq!(f.len(), probs.len());
        prop_assert!(f.iter().all(|&v| v >= 1));
        prop_assert_eq!(f.iter().map(|&v| v as u64).sum::<u64>(), PROB_TOTAL as u64);
    }

    #[test]
    fn fixed_packing_round_trips(l in latents(7)) {
        let bytes = pack_fixed(&l).unwrap();
        let bits = l.indices.len() * l.levels.trailing_zeros() as usize;
        prop_assert_eq!(bytes.len(), bits.div_ceil(8));
        let back = unpack_fixed(&bytes, l.frames(), l.dim, l.levels).unwrap();
        prop_assert_eq!(back, l);
    }

    #[test]
    fn arithmetic_round_trips_within_two_bits(l in latents(4), seed in any::<u64>(), skew in 0.0f64..8.0) {
        let (d, k) = (l.dim, l.levels);
        let p = encode_arith_with(&l, table_source(seed, d, k, skew)).unwrap();
        prop_assert!(p.bits as f64 <= p.ideal_bits + 2.0);
        prop_assert_eq!(p.bytes.len() as u64, p.bits.div_ceil(8));
        let back = decode_arith_with(&p.bytes, l.frames(), d, k, table_source(seed, d, k, skew)).unwrap();
        prop_assert_eq!(back, l);
    }

    #[test]
    fn arithmetic_detects_appended_bytes(l in latents(3), seed in any::<u64>(), extra in 1usize..4) {
        let (d, k) = (l.dim, l.levels);
        let mut p = encode_arith_with(&l, table_source(seed, d, k, 2.0)).unwrap();
        p.bytes.extend(std::iter::repeat_n(0xA5, extra));
        prop_assert!(decode_arith_with(&p.bytes, l.frames(), d, k, table_source(seed, d, k, 2.0)).is_err());
    }

    #[test]
    fn quantized_bits_match_frequencies(raw in proptest::collection::vec(0.01f64..1.0, 2..16), pick in any::<prop::sample::Index>()) {
        let s: f64 = raw.iter().sum();
        let f = quantize_probs(&raw.iter().map(|v| v / s).collect::<Vec<_>>());
        let i = pick.index(f.len());
        let expect = -(f[i] as f64 / PROB_TOTAL as f64).log2();
        prop_assert!((quantized_bits(&f, i) - expect).abs() < 1e-12);
    }

    #[test]
    fn header_round_trips(
        arith in any::<bool>(), scheme in 0usize..7, prior in 0usize..4,
        latent_dim in 1u16..1000, levels in 2u8..=255, frame_count in any::<u32>(), model_hash in any::<u64>(),
    ) {
        let h = StreamHeader {
            version: frae::bitstream::VERSION,
            mode: if arith { Mode::Arithmetic } else { Mode::Fixed },
            scheme: SchemeId::ALL[scheme],
            prior: PriorKind::ALL[prior],
            latent_dim,
            levels,
            frame_count,
            model_hash,
        };
        prop_assert_eq!(StreamHeader::from_bytes(&h.to_bytes()).unwrap(), h);
    }

    #[test]
    fn spectrogram_dump_round_trips(t in 0usize..12, f in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * f).map(|_| rng.gen_range(-120.0..20.0f32) as f64).collect();
        let s = Spectrogram::new(t, f, data).unwrap();
        prop_assert_eq!(Spectrogram::from_bytes(&s.to_bytes()).unwrap(), s);
    }

    #[test]
    fn normalizer_inverts(rows in proptest::collection::vec(proptest::collection::vec(-80.0f64..0.0, 3), 2..20)) {
        let n = Normalizer::fit(rows.iter().map(|r| r.as_slice()), 3);
        for r in &rows {
            let back = n.denormalize(&n.normalize(r));
            for (a, b) in back.iter().zip(r) {
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn g6_keeps_six_significant_digits(v in -1e9f64..1e9) {
        let s = fmt_g6(v);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - v).abs() <= 5e-6 * v.abs().max(f64::MIN_POSITIVE), "{} -> {}", v, s);
    }
}
