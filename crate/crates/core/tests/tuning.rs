use kgt_core::config::{Mode, RunConfig, Task};
use kgt_core::model::ModelConfig;
use kgt_core::pretrain::run_objectives;
use kgt_core::sequence::Vocab;
use kgt_core::tasks::tune;
use kgt_core::KnowledgeGraph;

fn ring(prefix: &str) -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    for i in 0..6 {
        let r = if i % 2 == 0 { "r0" } else { "r1" };
        g.add_labeled(&format!("{prefix}{i}"), &format!("{prefix}{r}"), &format!("{prefix}{}", (i + 1) % 6));
    }
    g
}

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig::smoke();
    cfg.model = ModelConfig::toy(8, 2, 1);
    cfg.sampling.k = 3;
    cfg.pretrain.steps = 3;
    cfg.tune.continual_steps = 4;
    cfg
}

#[test]
fn continual_training_leaves_layers_untouched_in_every_mode() {
    let cfg = small_cfg();
    let src = ring("s");
    let sv = Vocab::for_graph(&src);
    let mut pre = tune::pretrain_model::<f64>(&cfg, &sv).unwrap();
    run_objectives(&mut pre, &src, &sv, &tune::pretrain_run(&cfg, None)).unwrap();
    let ck = pre.to_checkpoint(3, None).unwrap();

    let tgt = ring("t");
    let tv = Vocab::for_graph(&tgt);
    for mode in [Mode::Frozen, Mode::Finetune, Mode::Scratch] {
        let mut c = cfg.clone();
        c.tune.mode = mode;
        let mut m = tune::task_model::<f64>(Some(&ck), &c, &tv).unwrap();
        tune::add_task_head(&mut m, &c, Task::Tc, None).unwrap();
        let before = m.to_checkpoint(0, None).unwrap();
        let emb = m.embeddings.to_vec();
        assert!(tune::continual_training(&mut m, &tgt, &tv, &c).unwrap().is_some());
        let after = m.to_checkpoint(0, None).unwrap();
        assert!(tune::same_layers(&before, &after), "{mode}: layers moved");
        assert_ne!(emb, m.embeddings.to_vec(), "{mode}: embeddings did not train");
        assert_eq!(tune::same_layers(&ck, &after), mode != Mode::Scratch, "{mode}");
    }
}
