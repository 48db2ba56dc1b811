use harpbd::bodygraph::{build_graph, BodyGraph};
use harpbd::dataset::{loso_splits, AugmentConfig, TrialKind, WindowSample, CHANNELS, JOINTS};
use harpbd::layers::GcMode;
use harpbd::losses::{loss_on_tape, ClassCounts, LossConfig};
use harpbd::network::{har_forward, hierarchical_input, one_hot, window_block, GcLstm, ModelSpec, Pipeline, Role, Strategy, TrainConfig};
use harpbd::numerics::{finite_difference_check, SeedStream, Tape, Tensor};
use rand::Rng;

fn spec(kernels: usize, hidden: usize, step: usize) -> ModelSpec {
    ModelSpec {
        gc_layers: 2,
        gc_kernels: kernels,
        gc_mode: GcMode::Single,
        gc_relu: true,
        lstm_layers: 2,
        lstm_hidden: hidden,
        dropout: 0.0,
        frame_step: step,
    }
}

fn noise_window(seed: u64, timesteps: usize) -> WindowSample {
    let mut r = SeedStream::new(seed).rng();
    WindowSample {
        features: (0..timesteps * JOINTS * CHANNELS).map(|_| r.random_range(-1.0..1.0)).collect(),
        timesteps,
        activity: 1,
        protective: false,
        subject_id: "S01".into(),
        trial_kind: TrialKind::Normal,
        window_start: 0,
        is_augmented: false,
        window_id: 0,
    }
}

#[test]
fn activity_output_is_invariant_to_node_order_once_concatenation_is_restored() {
    let g = BodyGraph::full();
    let model = GcLstm::har(spec(3, 4, 20), &g).unwrap();
    let params = model.init(SeedStream::new(3));
    let window = noise_window(1, 180);
    let (p, _) = har_forward(&window, &g, &model, &params).unwrap();

    let mut order: Vec<u32> = g.node_ids().to_vec();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut SeedStream::new(8).rng());
    let edges: Vec<(u32, u32)> = g.edges().collect();
    let pg = build_graph(&order, &edges).unwrap();

    // Node i of the relabeled graph feeds LSTM rows of old node pos(order[i]).
    let k = 3;
    let mut permuted = params.clone();
    let w = params.get("har.lstm0.w_x").unwrap();
    let pw = permuted.get_mut("har.lstm0.w_x").unwrap();
    for (i, id) in order.iter().enumerate() {
        let old = g.index_of(*id).unwrap();
        for c in 0..k {
            for col in 0..w.cols() {
                pw.set(i * k + c, col, w.at(old * k + c, col));
            }
        }
    }
    let (q, _) = har_forward(&window, &pg, &model, &permuted).unwrap();
    for (a, b) in p.iter().zip(&q) {
        assert!((a - b).abs() < 1e-12, "{p:?} vs {q:?}");
    }
}

#[test]
fn protective_gradient_on_a_small_graph() {
    let g = build_graph(&[1, 2, 3, 4], &[(1, 2), (2, 3), (3, 4)]).unwrap();
    let model = GcLstm::pbd(spec(3, 3, 1), &g, true).unwrap();
    let params = model.init(SeedStream::new(5));
    let w = noise_window(2, 6);
    let x = window_block(&[&w], &g, 1).unwrap();
    let x = hierarchical_input(&x.reshape(vec![6, 4, 3]), &one_hot(2, 6)).unwrap().reshape(vec![24, 9]);
    let counts = ClassCounts::new(vec![30, 7]).unwrap();
    let cfg = LossConfig::cfcc(2.0, 0.9999);
    let weights = cfg.class_weights(&counts);
    for name in params.names() {
        let err = finite_difference_check(&params, name, 1e-5, |t: &mut Tape, b| {
            let xv = t.constant(x.clone());
            let p = model.forward(t, b, xv, 1, &g, None).unwrap();
            loss_on_tape(t, p, &[1], &weights, &cfg)
        })
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

/// Two activity classes separated by the sign of every coordinate.
fn separable(subjects: usize, per: usize) -> Vec<WindowSample> {
    let mut out = Vec::new();
    for s in 0..subjects {
        for k in 0..per {
            let mut w = noise_window((s * per + k) as u64, 60);
            let class = (k % 2) as u8;
            let sign = if class == 0 { -1.0 } else { 1.0 };
            for v in &mut w.features {
                *v = sign * (0.5 + 0.5 * v.abs());
            }
            w.activity = class;
            w.protective = class == 1 && k % 4 == 1;
            w.subject_id = format!("S{s:02}");
            w.window_id = s * per + k;
            out.push(w);
        }
    }
    out
}

fn toy_pipeline(strategy: Strategy, epochs: usize) -> Pipeline {
    let small = ModelSpec { gc_layers: 1, lstm_layers: 1, ..spec(3, 4, 10) };
    let cfg = TrainConfig {
        strategy,
        epochs,
        batch_size: 8,
        lr_har: 1e-2,
        lr_pbd: 1e-2,
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    };
    Pipeline::new(BodyGraph::full(), small.clone(), small, cfg).unwrap()
}

#[test]
fn pretraining_improves_on_a_separable_task() {
    let windows = separable(3, 12);
    let p = toy_pipeline(Strategy::PretrainedFrozen, 8);
    let pre = p.pretrain_har(&windows, SeedStream::new(1)).unwrap();
    assert!((1..=8).contains(&pre.selected_epoch));
    let at_snapshot = pre.log[pre.selected_epoch - 1].acc;
    assert!(at_snapshot >= pre.log[0].acc);
    assert!(pre.log.iter().all(|e| e.acc <= at_snapshot));
}

#[test]
fn every_strategy_lowers_training_loss() {
    let windows = separable(3, 12);
    let fold = loso_splits(&windows).unwrap()[0].materialize(&windows, None);
    for s in Strategy::ALL {
        let t = toy_pipeline(s, 12).train_fold(&fold, SeedStream::new(2)).unwrap();
        let (first, last) = (t.pbd_log.first().unwrap().loss, t.pbd_log.last().unwrap().loss);
        assert!(last < first, "{s}: {first} -> {last}");
    }
}

#[test]
fn frozen_mode_feeds_exact_one_hot_activity() {
    let windows = separable(3, 6);
    let p = toy_pipeline(Strategy::PretrainedFrozen, 1);
    let fold = loso_splits(&windows).unwrap()[0].materialize(&windows, None);
    let t = p.train_fold(&fold, SeedStream::new(4)).unwrap();
    let refs: Vec<&WindowSample> = fold.test_windows.iter().collect();
    let probs = p.har_probs(t.har_params.as_ref().unwrap(), &refs).unwrap();
    for row in probs {
        let y = one_hot(harpbd::layers::argmax(&row), 6);
        assert_eq!(y.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(y.iter().sum::<f64>(), 1.0);
    }
}

#[test]
fn zero_protective_head_gives_even_odds() {
    let g = BodyGraph::full();
    let model = GcLstm::pbd(spec(2, 3, 30), &g, true).unwrap();
    let mut params = model.init(SeedStream::new(0));
    for name in ["pbd.head.w", "pbd.head.b"] {
        params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let (p, y) = harpbd::network::pbd_forward(&noise_window(0, 180), &[0.0; 6], &g, &model, &params).unwrap();
    assert_eq!((p, y), (vec![0.5, 0.5], 0));
    assert_eq!(model.role, Role::Pbd);
}

#[test]
fn zero_label_vector_pads_with_zeros() {
    let x = Tensor::new(vec![2, 3, 3], (0..18).map(f64::from).collect());
    let y = hierarchical_input(&x, &[0.0; 6]).unwrap();
    for (row, orig) in y.data().chunks(9).zip(x.data().chunks(3)) {
        assert_eq!(&row[..3], orig);
        assert!(row[3..].iter().all(|&v| v == 0.0));
    }
}
