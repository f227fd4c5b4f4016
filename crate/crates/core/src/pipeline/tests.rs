use proptest::prelude::*;

use super::*;
use crate::corpus::Augmentation;

fn entry(id: usize, dev: f64) -> PoolEntry {
    PoolEntry {
        id,
        checkpoint: format!("model-{id:03}.ckpt"),
        architecture: format!("arch{}", id % 3),
        direction: Direction::L2r,
        shard: None,
        augmentation: Augmentation::Clean,
        method: Some(FinetuneMethod::Normal),
        dev_bleu: Some(dev),
        self_bleu: None,
    }
}

fn pool(devs: &[f64]) -> Vec<PoolEntry> {
    devs.iter().enumerate().map(|(i, &d)| entry(i, d)).collect()
}

#[test]
fn normal_selection_sorts_by_dev_then_id() {
    let p = pool(&[30.0, 32.5, 31.0, 32.5, 29.0]);
    assert_eq!(ensemble_select_normal(&p, 1).unwrap(), vec![1]);
    assert_eq!(ensemble_select_normal(&p, 3).unwrap(), vec![1, 3, 2]);
    let mut all = ensemble_select_normal(&p, 5).unwrap();
    all.sort_unstable();
    assert_eq!(all, vec![0, 1, 2, 3, 4]);
}

#[test]
fn selection_errors() {
    let p = pool(&[1.0, 2.0]);
    assert!(matches!(ensemble_select_normal(&p, 3), Err(Error::Pool(_))));
    assert!(matches!(ensemble_select_normal(&p, 0), Err(Error::Pool(_))));
    let mut missing = p.clone();
    missing[1].dev_bleu = None;
    assert!(matches!(ensemble_select_normal(&missing, 1), Err(Error::Pool(_))));
    let mut t = BTreeMap::new();
    t.insert(0, vec!["a b".to_string()]);
    assert!(matches!(ensemble_select_self_bleu(&p, &t, 1, 1.0), Err(Error::Pool(_))));
}

fn outputs(lines: &[&[&str]]) -> BTreeMap<usize, Vec<String>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| (i, l.iter().map(|s| s.to_string()).collect()))
        .collect()
}

#[test]
fn identical_models_fall_back_to_dev_order() {
    let p = pool(&[20.0, 20.5, 20.2]);
    let same: &[&str] = &["t1 t2 t3 t4", "t5 t6 t7 t8 t9"];
    let t = outputs(&[same, same, same]);
    let s = ensemble_select_self_bleu(&p, &t, 3, 1.0).unwrap();
    assert_eq!(s.ids, vec![1, 2, 0]);
    assert!(s.self_bleu.values().all(|&b| (b - 100.0).abs() < 1e-9));
}

#[test]
fn the_diverse_model_is_selected_first() {
    let p = pool(&[25.0, 25.0, 25.0, 24.5]);
    let clone: &[&str] = &["t1 t2 t3 t4", "t5 t6 t7 t8 t9"];
    let diverse: &[&str] = &["t1 t9 t3 t7", "t2 t6 t4 t8 t5"];
    let t = outputs(&[clone, clone, clone, diverse]);
    let s = ensemble_select_self_bleu(&p, &t, 2, 1.0).unwrap();
    assert_eq!(s.ids[0], 3);
    assert!(s.self_bleu[&3] < s.self_bleu[&0]);
    // the floor excludes a diverse but weak model
    let weak = pool(&[25.0, 25.0, 25.0, 20.0]);
    assert_eq!(ensemble_select_self_bleu(&weak, &t, 2, 1.0).unwrap().ids, vec![0, 1]);
    // and lets it back in once the floor is wide enough
    assert_eq!(ensemble_select_self_bleu(&weak, &t, 2, 10.0).unwrap().ids[0], 3);
}

#[test]
fn too_few_models_above_the_floor_are_filled_by_dev_order() {
    let p = pool(&[30.0, 10.0, 20.0]);
    let t = outputs(&[&["a b c d"], &["a c b d"], &["d c b a"]]);
    assert_eq!(ensemble_select_self_bleu(&p, &t, 3, 1.0).unwrap().ids, vec![0, 2, 1]);
}

#[test]
fn transfer_requires_distinct_architectures() {
    let spec = crate::model_zoo::Preset::Aan.spec();
    let v = crate::text::Vocabulary::build(&[vec!["a"]]);
    let model = Model::build(spec, v.clone(), v, 0).unwrap();
    let members: Vec<PoolModel> = pool(&[5.0, 6.0, 7.0, 8.0])
        .into_iter()
        .map(|mut e| {
            e.architecture = if e.id < 2 { "x".into() } else { "y".into() };
            PoolModel { entry: e, model: model.clone() }
        })
        .collect();
    let chosen = transfer_ensemble(&members, 2).unwrap();
    assert_eq!(chosen.iter().map(|p| p.entry.id).collect::<Vec<_>>(), vec![3, 1]);
    assert!(matches!(transfer_ensemble(&members, 3), Err(Error::Pool(_))));
    let unfinetuned: Vec<PoolModel> = members
        .into_iter()
        .map(|mut p| {
            p.entry.method = None;
            p
        })
        .collect();
    assert!(matches!(transfer_ensemble(&unfinetuned, 1), Err(Error::Pool(_))));
}

#[test]
fn untrained_reverse_models_are_rejected() {
    let v = crate::text::Vocabulary::build(&[vec!["a"]]);
    let model = Model::build(crate::model_zoo::Preset::Aan.spec(), v.clone(), v, 0).unwrap();
    let err = back_translate(&["a".to_string()], &[&model], &DecodeConfig::greedy(), &FilterRules::default(), 1).unwrap_err();
    assert!(matches!(err, Error::ModelState(_)), "{err:?}");
    assert!(matches!(
        back_translate(&[], &[], &DecodeConfig::greedy(), &FilterRules::default(), 1),
        Err(Error::Pool(_))
    ));
}

proptest! {
    #[test]
    fn selections_are_pure_and_well_formed(devs in prop::collection::vec(0u8..6, 1..8), k in 1usize..8) {
        let p = pool(&devs.iter().map(|&d| 20.0 + d as f64 * 0.4).collect::<Vec<_>>());
        let k = k.min(p.len());
        let a = ensemble_select_normal(&p, k).unwrap();
        prop_assert_eq!(&a, &ensemble_select_normal(&p, k).unwrap());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        // every selected model is at least as good as every unselected one
        let worst = a.iter().map(|&i| p[i].dev_bleu.unwrap()).fold(f64::INFINITY, f64::min);
        prop_assert!(p.iter().filter(|e| !a.contains(&e.id)).all(|e| e.dev_bleu.unwrap() <= worst));

        let t: BTreeMap<usize, Vec<String>> = p
            .iter()
            .map(|e| (e.id, vec![format!("t{} t{} t1 t2", e.id % 3, devs[e.id]), "t5 t6 t7".to_string()]))
            .collect();
        let s = ensemble_select_self_bleu(&p, &t, k, 1.0).unwrap();
        prop_assert_eq!(&s, &ensemble_select_self_bleu(&p, &t, k, 1.0).unwrap());
        prop_assert_eq!(s.ids.len(), k);
        prop_assert_eq!(s.self_bleu.len(), p.len());
    }
}
