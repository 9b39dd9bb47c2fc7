use atlas_msa::block::{msa_block_forward, CommunicationMode};
use atlas_msa::cache::{InvalidationSite, Pathway, QkvCache, Role};
use atlas_msa::counter::OpCounter;
use atlas_msa::oracle::{check_equivalence, fixture_family, BlockFixture};

fn cached_run(f: &BlockFixture, mode: CommunicationMode) -> (QkvCache, OpCounter) {
    let (layout, params, mut state) = f.build().unwrap();
    let mut cache = QkvCache::new(layout.levels());
    let mut ops = OpCounter::new();
    msa_block_forward(&params, &layout, &mut state, mode, Some(&mut cache), &mut ops).unwrap();
    (cache, ops)
}

#[test]
fn cache_is_transparent_on_every_fixture_and_mode() {
    for f in fixture_family() {
        for mode in CommunicationMode::ALL {
            let case = check_equivalence(&f, mode, false).unwrap();
            assert!(case.cache_equal, "{} {mode}", case.fixture);
            assert!(case.projections_cached <= case.projections_uncached);
        }
    }
}

#[test]
fn multi_scale_fixtures_project_strictly_less() {
    for f in fixture_family() {
        let case = check_equivalence(&f, CommunicationMode::MSA, false).unwrap();
        if case.levels - f.first >= 2 {
            assert!(case.projections_cached < case.projections_uncached, "{}", case.fixture);
        }
    }
}

#[test]
fn coarse_keys_and_values_are_projected_once_per_revision() {
    for f in fixture_family() {
        let (cache, _) = cached_run(&f, CommunicationMode::MSA);
        let n = cache.max_projections_per_revision(|a| matches!(a.role, Role::Key | Role::Value));
        assert!(n <= 1, "{}: {n}", f.name());
        let coarse_hits = cache
            .accesses()
            .iter()
            .filter(|a| a.hit && a.key.pathway == Pathway::TopDown && a.key.scale > f.first)
            .count();
        let levels = f.layout().unwrap().levels();
        assert_eq!(coarse_hits > 0, levels - f.first >= 2, "{}", f.name());
    }
}

#[test]
fn hits_and_misses_add_up_to_lookups() {
    let f = fixture_family()[6];
    let (cache, ops) = cached_run(&f, CommunicationMode::MSA);
    assert_eq!(cache.hits() + cache.misses(), cache.accesses().len() as u64);
    assert_eq!(ops.cache_misses(), ops.projection_calls());
    assert_eq!(ops.cache_hits(), cache.hits());
}

#[test]
fn window_mode_invalidates_only_its_scale() {
    let f = fixture_family()[6];
    let (cache, _) = cached_run(&f, CommunicationMode::WINDOW_ONLY);
    assert!(cache.events().iter().all(|e| e.scale == f.first && e.site == InvalidationSite::CoarsestSelfAttention));
}
