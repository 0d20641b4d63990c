use parahydra::coder::Bitstream;
use parahydra::config::ModelConfig;
use parahydra::model::Codec;
use parahydra::par;
use parahydra::synthetic::{gen_synthetic_views, SceneSpec};
use parahydra::{Error, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig { latent_channels: 8, num_slices: 2, window: 3, sigma_min: 0.11 }
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn odd_sized_views_roundtrip() {
    let codec = Codec::new(&tiny(), 1).unwrap();
    let views = gen_synthetic_views(3, &SceneSpec::new(3, 50, 70, 2)).unwrap();
    let enc = codec.encode(&views, 4).unwrap();
    let bytes = enc.bitstream.to_bytes().unwrap();
    let bs = Bitstream::from_bytes(&bytes).unwrap();
    assert_eq!((bs.height, bs.width, bs.padded_height, bs.padded_width), (50, 70, 64, 128));
    let latents = codec.decode_latents(&bs).unwrap();
    assert!(latents.iter().zip(&enc.latents).all(|(a, b)| same_bits(a, b)));
    let rec = codec.decode(&bs).unwrap();
    assert_eq!(rec.len(), 3);
    for r in &rec {
        assert_eq!(r.shape(), &[1, 3, 50, 70]);
        assert!(r.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn views_are_encoded_independently() {
    let codec = Codec::new(&tiny(), 2).unwrap();
    let views = gen_synthetic_views(4, &SceneSpec::new(3, 64, 64, 3)).unwrap();
    let joint = codec.encode(&views, 0).unwrap();
    for (k, v) in views.iter().enumerate() {
        let alone = codec.encode(std::slice::from_ref(v), 0).unwrap();
        assert!(same_bits(&alone.latents[0], &joint.latents[k]));
        assert_eq!(alone.bitstream.views[0], joint.bitstream.views[k]);
    }
}

#[test]
fn joint_decoder_is_symmetric_in_view_order() {
    let codec = Codec::new(&tiny(), 3).unwrap();
    let views = gen_synthetic_views(5, &SceneSpec::new(3, 64, 64, 3)).unwrap();
    let latents = codec.encode(&views, 0).unwrap().latents;
    let rec = codec.reconstruct(&latents, 64, 64).unwrap();
    let perm = [2, 0, 1];
    let shuffled: Vec<Tensor> = perm.iter().map(|&i| latents[i].clone()).collect();
    let rec_p = codec.reconstruct(&shuffled, 64, 64).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert!(rec[i].max_abs_diff(&rec_p[j]).unwrap() <= 1e-6);
    }
}

#[test]
fn encoding_is_deterministic_across_thread_counts() {
    let codec = Codec::new(&tiny(), 4).unwrap();
    let views = gen_synthetic_views(6, &SceneSpec::new(2, 64, 64, 3)).unwrap();
    let a = codec.encode(&views, 0).unwrap().bitstream.to_bytes().unwrap();
    let b = codec.encode(&views, 0).unwrap().bitstream.to_bytes().unwrap();
    let c = par::single_threaded(|| codec.encode(&views, 0)).unwrap().bitstream.to_bytes().unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn saved_weights_reproduce_bitstream() {
    let codec = Codec::new(&tiny(), 5).unwrap();
    let mut buf = Vec::new();
    codec.save(&mut buf).unwrap();
    let loaded = Codec::load(buf.as_slice()).unwrap();
    let views = gen_synthetic_views(7, &SceneSpec::new(2, 64, 64, 3)).unwrap();
    assert_eq!(
        codec.encode(&views, 0).unwrap().bitstream.to_bytes().unwrap(),
        loaded.encode(&views, 0).unwrap().bitstream.to_bytes().unwrap()
    );
}

#[test]
fn damaged_segments_are_reported() {
    let codec = Codec::new(&tiny(), 6).unwrap();
    let views = gen_synthetic_views(8, &SceneSpec::new(1, 64, 64, 0)).unwrap();
    let mut bs = codec.encode(&views, 0).unwrap().bitstream;
    bs.views[0].slices[1].1.extend_from_slice(&[1, 2, 3, 4, 5, 6, 7, 8, 9]);
    assert!(matches!(codec.decode_latents(&bs), Err(Error::Corrupt { .. })));
}

#[test]
fn bad_inputs_are_rejected() {
    let codec = Codec::new(&tiny(), 7).unwrap();
    assert!(matches!(codec.encode(&[], 0), Err(Error::Input(_))));
    let bright = Tensor::full(&[1, 3, 8, 8], 1.5);
    assert!(matches!(codec.encode(&[bright], 0), Err(Error::Input(_))));
    let a = Tensor::full(&[1, 3, 8, 8], 0.5);
    let b = Tensor::full(&[1, 3, 8, 9], 0.5);
    assert!(codec.encode(&[a, b], 0).is_err());
}
