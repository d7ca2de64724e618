use rand::seq::SliceRandom;
use rand::Rng;

use super::{apportion, dirichlet, Assignment, ClientShard, Dataset, SkewSpec, SplitKind};
use crate::error::{Error, Result};
use crate::seed::{self, tag};

/// Smallest per-class count every client must receive from
/// [`partition_dataset`] (one train and one test sample).
pub const MIN_PARTITION_PER_CLASS: usize = 2;

const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Per-class train/test split. Each class with at least two samples puts
/// `round(test_fraction * n_c)` samples (at least one, never all) in test.
/// Both returned index lists are ascending.
pub fn stratified_split<R: Rng>(data: &Dataset, test_fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..data.num_classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] == class).collect();
        idx.shuffle(rng);
        let n = idx.len();
        let t = if n < 2 {
            0
        } else {
            ((test_fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        test.extend_from_slice(&idx[..t]);
        train.extend_from_slice(&idx[t..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Dirichlet label-skew partition of an existing dataset.
///
/// For every class the samples are shuffled and dealt to clients in
/// Dirichlet(alpha) proportions. A draw that leaves some client with fewer
/// than [`MIN_PARTITION_PER_CLASS`] samples of a class is redrawn, up to 100
/// times. Each client's samples are then split 80/20, stratified by class.
/// Feature shifts in `skew` are not applied here.
pub fn partition_dataset(data: &Dataset, num_clients: usize, skew: &SkewSpec) -> Result<Vec<ClientShard>> {
    skew.validate()?;
    if num_clients == 0 {
        return Err(Error::Config("num_clients must be positive".into()));
    }
    let need = num_clients * MIN_PARTITION_PER_CLASS * data.num_classes;
    if data.len() < need {
        return Err(Error::Data(format!(
            "{} samples cannot be partitioned over {num_clients} clients (need at least {need})",
            data.len()
        )));
    }
    let mut rng = seed::rng(skew.seed, &[tag::PARTITION]);
    let by_class: Vec<Vec<usize>> = (0..data.num_classes)
        .map(|c| (0..data.len()).filter(|&i| data.labels()[i] == c).collect())
        .collect();
    let mut owner = vec![0usize; data.len()];
    let mut ok = false;
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut counts = vec![vec![0usize; data.num_classes]; num_clients];
        for (c, members) in by_class.iter().enumerate() {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = dirichlet(skew.alpha, num_clients, &mut rng);
            let sizes = apportion(&props, members.len());
            let mut start = 0;
            for (client, &s) in sizes.iter().enumerate() {
                for &i in &members[start..start + s] {
                    owner[i] = client;
                }
                counts[client][c] = s;
                start += s;
            }
        }
        if counts.iter().flatten().all(|&n| n >= MIN_PARTITION_PER_CLASS) {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::Data(format!(
            "class starvation: no valid partition in {MAX_PARTITION_ATTEMPTS} attempts (alpha={})",
            skew.alpha
        )));
    }
    let mut assignment = Vec::with_capacity(data.len());
    for client in 0..num_clients {
        let members: Vec<usize> = (0..data.len()).filter(|&i| owner[i] == client).collect();
        let local = data.subset(&members);
        let mut split_rng = seed::rng(skew.seed, &[tag::SPLIT, client as u64]);
        let (_, test) = stratified_split(&local, 0.2, &mut split_rng);
        let test: std::collections::BTreeSet<usize> = test.into_iter().collect();
        for (pos, &i) in members.iter().enumerate() {
            let kind = if test.contains(&pos) { SplitKind::Test } else { SplitKind::Train };
            assignment.push((i, client, kind));
        }
    }
    assignment.sort_unstable();
    let assignment: Assignment = assignment.into_iter().map(|(_, c, k)| (c, k)).collect();
    let mut shards = shards_from_assignment(data, &assignment)?;
    for s in shards.iter_mut() {
        s.provenance = format!("partition(alpha={}, seed={}, client={})", skew.alpha, skew.seed, s.client_id);
    }
    Ok(shards)
}

/// Rebuilds client shards from a per-sample `(client, split)` list.
pub fn shards_from_assignment(data: &Dataset, assignment: &Assignment) -> Result<Vec<ClientShard>> {
    if assignment.len() != data.len() {
        return Err(Error::Data(format!(
            "assignment lists {} samples, dataset has {}",
            assignment.len(),
            data.len()
        )));
    }
    let clients = assignment.iter().map(|(c, _)| c + 1).max().unwrap_or(0);
    (0..clients)
        .map(|client| {
            let pick = |kind: SplitKind| -> Vec<usize> {
                (0..data.len())
                    .filter(|&i| assignment[i] == (client, kind))
                    .collect()
            };
            let (train, test) = (pick(SplitKind::Train), pick(SplitKind::Test));
            if train.is_empty() && test.is_empty() {
                return Err(Error::Data(format!("client {client} has no samples")));
            }
            Ok(ClientShard {
                client_id: client,
                train: data.subset(&train),
                test: data.subset(&test),
                provenance: format!("assignment(client={client})"),
            })
        })
        .collect()
}
