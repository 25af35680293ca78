mod common;

use genmove::harness::{run_task, train, Task, TaskSpec};

use common::{periodic_dataset, tiny_config};

#[test]
fn predict_next_on_periodic_users_is_exact() {
    let ds = periodic_dataset(30, 4);
    let cfg = tiny_config(&["epochs=160", "embed_epochs=100", "beta_end=0.7", "lr=3e-3"]);
    let out = train(&cfg, &ds, None).unwrap();
    let report = run_task(&TaskSpec::from_config(Task::PredictNext, &cfg), &cfg, &out.artifacts, &ds).unwrap().report;
    assert_eq!(report.get("acc@5"), Some(1.0), "{:?}", report.metrics);
}
