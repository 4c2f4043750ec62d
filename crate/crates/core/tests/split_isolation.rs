use std::cell::RefCell;
use std::collections::BTreeSet;

use visaff_core::datamodel::{Dataset, Split};
use visaff_core::providers::bundle::{generate_dataset, generate_features, MemoryStore, SyntheticBundleSpec};
use visaff_core::providers::{Feature, FeatureStore, Modality, ModalityValues};
use visaff_core::training::{evaluate, train, TrainConfig};

/// Records every conversation whose features are read.
struct LoggingStore {
    inner: MemoryStore,
    seen: RefCell<BTreeSet<String>>,
}

impl FeatureStore for LoggingStore {
    fn fetch(&self, conv_id: &str, index: usize, modality: Modality) -> Option<Feature> {
        self.seen.borrow_mut().insert(conv_id.to_string());
        self.inner.fetch(conv_id, index, modality)
    }

    fn dim(&self, modality: Modality) -> Option<usize> {
        self.inner.dim(modality)
    }
}

fn fixture() -> (Dataset, LoggingStore) {
    let mut spec = SyntheticBundleSpec {
        train_conversations: 10,
        val_conversations: 4,
        test_conversations: 6,
        ..Default::default()
    };
    spec.features.num_labels = 3;
    spec.features.dims = ModalityValues {
        visual: 6,
        text: 4,
        audio: 4,
    };
    let ds = generate_dataset(&spec, 2).unwrap();
    let inner = generate_features(&ds, &spec.features, 2).unwrap();
    (
        ds,
        LoggingStore {
            inner,
            seen: RefCell::default(),
        },
    )
}

fn ids(ds: &Dataset, split: Split) -> BTreeSet<String> {
    ds.split(split).map(|c| c.conv_id.clone()).collect()
}

#[test]
fn training_never_reads_test_features() {
    let (ds, store) = fixture();
    let cfg = TrainConfig {
        epochs: 3,
        hidden: 8,
        proj_dim: 4,
        ..Default::default()
    };
    let out = train(&cfg, &ds, &store).unwrap();
    let seen = store.seen.borrow().clone();
    assert!(seen.is_disjoint(&ids(&ds, Split::Test)));
    let mut allowed = ids(&ds, Split::Train);
    allowed.extend(ids(&ds, Split::Val));
    assert_eq!(seen, allowed);

    store.seen.borrow_mut().clear();
    evaluate(&out.model, &ds, Split::Val, &store).unwrap();
    assert_eq!(*store.seen.borrow(), ids(&ds, Split::Val));
}

#[test]
fn missing_test_features_do_not_block_training() {
    let (mut ds, store) = fixture();
    // a test conversation whose features were never generated
    let mut ghost = ds.split(Split::Test).next().unwrap().clone();
    ghost.conv_id = "ghost".into();
    for u in &mut ghost.utterances {
        u.conv_id = "ghost".into();
    }
    ds.conversations.push(ghost);
    let cfg = TrainConfig {
        epochs: 1,
        hidden: 8,
        proj_dim: 4,
        ..Default::default()
    };
    let out = train(&cfg, &ds, &store).unwrap();
    let err = evaluate(&out.model, &ds, Split::Test, &store).unwrap_err();
    assert!(err.to_string().contains("ghost#0/visual"), "{err}");
}
