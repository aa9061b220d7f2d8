mod support;

use primid_core::gallery::{Gallery, GalleryError, Individual, Species};
use rand::Rng;

#[test]
fn fifty_individuals_round_trip_bit_exactly() {
    let mut rng = support::rng(41);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gallery.json");
    let mut gallery = Gallery::new();
    for i in 0..50 {
        let species = Species::ALL[i % 3];
        let n = rng.random_range(1..=6);
        let entries = (0..n)
            .map(|j| (support::random_embedding(&mut rng, 256), format!("ind{i:02}/img{j}.jpg")))
            .collect();
        let individual = Individual {
            id: format!("ind{i:02}"),
            name: format!("Individual {i}"),
            species,
        };
        gallery.enroll(individual, entries, 1_700_000_000 + i as u64).unwrap();
    }
    gallery.save(&path).unwrap();
    let loaded = Gallery::load(&path).unwrap();
    assert_eq!(loaded, gallery);
    for (id, t) in gallery.templates(None) {
        let other = &loaded.get(id).unwrap().template;
        for (a, b) in t.embeddings().zip(other.embeddings()) {
            let bits = |e: &primid_core::embedding::Embedding| e.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
    assert_eq!(loaded.list_individuals(Some(Species::Lemur)).len(), 17);
}

#[test]
fn truncated_sidecar_is_a_format_error() {
    let mut rng = support::rng(42);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    let mut g = Gallery::new();
    let individual = Individual {
        id: "a".into(),
        name: "A".into(),
        species: Species::Chimpanzee,
    };
    g.enroll(individual, vec![(support::random_embedding(&mut rng, 8), "x".into())], 0).unwrap();
    g.save(&path).unwrap();
    let sidecar = dir.path().join("g.1.emb");
    let bytes = std::fs::read(&sidecar).unwrap();
    std::fs::write(&sidecar, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Gallery::load(&path), Err(GalleryError::Format(_))));
}
