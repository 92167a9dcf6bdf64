//! Straightforward nested-loop versions of every pipeline stage, on plain nested `Vec`s.
//! Nothing here calls into the library.

/// `[example][head][dim]`
pub type Features = Vec<Vec<Vec<f64>>>;

/// `[head][class][dim]` class means over the training examples.
pub fn centroids(x: &Features, train: &[usize], labels: &[usize], num_classes: usize) -> Vec<Vec<Vec<f64>>> {
    let k = x[0].len();
    let d = x[0][0].len();
    let mut out = vec![vec![vec![0.0; d]; num_classes]; k];
    for j in 0..k {
        for c in 0..num_classes {
            let mut count = 0;
            for &i in train {
                if labels[i] == c {
                    count += 1;
                    for t in 0..d {
                        out[j][c][t] += x[i][j][t];
                    }
                }
            }
            for t in 0..d {
                out[j][c][t] /= count as f64;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for t in 0..a.len() {
        s += a[t] * b[t];
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// `[row][head][class]`
pub fn scores(x: &Features, rows: &[usize], cent: &[Vec<Vec<f64>>], use_cosine: bool) -> Vec<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for &i in rows {
        let mut per_head = Vec::new();
        for j in 0..cent.len() {
            let mut s = Vec::new();
            for c in 0..cent[j].len() {
                s.push(if use_cosine {
                    cosine(&x[i][j], &cent[j][c])
                } else {
                    dot(&x[i][j], &cent[j][c])
                });
            }
            per_head.push(s);
        }
        out.push(per_head);
    }
    out
}

pub fn softmax(values: &[f64], tau: f64) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in values {
        if v > m {
            m = v;
        }
    }
    let e: Vec<f64> = values.iter().map(|&v| ((v - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn posteriors(s: &[Vec<Vec<f64>>], tau_p: f64) -> Vec<Vec<Vec<f64>>> {
    s.iter()
        .map(|row| row.iter().map(|h| softmax(h, tau_p)).collect())
        .collect()
}

pub fn margin(p: &[f64], y: usize) -> f64 {
    let mut best_other = f64::NEG_INFINITY;
    for (c, &v) in p.iter().enumerate() {
        if c != y && v > best_other {
            best_other = v;
        }
    }
    let m = p[y] - best_other;
    if m > 0.0 {
        m
    } else {
        0.0
    }
}

/// `[train example][head]`
pub fn margins(post: &[Vec<Vec<f64>>], ys: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (r, &y) in ys.iter().enumerate() {
        out.push(post[r].iter().map(|p| margin(p, y)).collect());
    }
    out
}

pub fn global_reliability(m: &[Vec<f64>]) -> Vec<f64> {
    let k = m[0].len();
    let mut r = vec![0.0; k];
    for row in m {
        for j in 0..k {
            r[j] += row[j];
        }
    }
    r.iter().map(|v| v / m.len() as f64).collect()
}

/// `[class][head]`
pub fn local_reliability(m: &[Vec<f64>], ys: &[usize], num_classes: usize) -> Vec<Vec<f64>> {
    let k = m[0].len();
    let mut out = vec![vec![0.0; k]; num_classes];
    for c in 0..num_classes {
        let mut n = 0;
        for (r, &y) in ys.iter().enumerate() {
            if y == c {
                n += 1;
                for j in 0..k {
                    out[c][j] += m[r][j];
                }
            }
        }
        for j in 0..k {
            out[c][j] /= n as f64;
        }
    }
    out
}

/// Indices of the `k` largest values, larger first, equal values by lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// One weight row from a reliability row.
pub fn weight_row(rel: &[f64], k: usize, tau_w: f64) -> Vec<f64> {
    let top = top_k(rel, k);
    let picked: Vec<f64> = top.iter().map(|&j| rel[j]).collect();
    let soft = softmax(&picked, tau_w);
    let mut w = vec![0.0; rel.len()];
    for (n, &j) in top.iter().enumerate() {
        w[j] = soft[n];
    }
    w
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..values.len() {
        if values[c] > values[best] {
            best = c;
        }
    }
    best
}

/// Aggregate scores `[row][class]` with per-class weights `w[class][head]`.
pub fn aggregate(post: &[Vec<Vec<f64>>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for row in post {
        let mut agg = vec![0.0; w.len()];
        for c in 0..w.len() {
            for j in 0..row.len() {
                agg[c] += w[c][j] * row[j][c];
            }
        }
        out.push(agg);
    }
    out
}

pub fn head_accuracy(s: &[Vec<Vec<f64>>], ys: &[usize]) -> Vec<f64> {
    let k = s[0].len();
    let mut acc = vec![0.0; k];
    for j in 0..k {
        let mut hits = 0;
        for (r, &y) in ys.iter().enumerate() {
            if argmax(&s[r][j]) == y {
                hits += 1;
            }
        }
        acc[j] = hits as f64 / ys.len() as f64;
    }
    acc
}

pub fn vote(s: &[Vec<Vec<f64>>], heads: &[usize], num_classes: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for row in s {
        let mut counts = vec![0.0; num_classes];
        for &j in heads {
            counts[argmax(&row[j])] += 1.0;
        }
        out.push(argmax(&counts));
    }
    out
}

pub fn confusion(preds: &[usize], labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for i in 0..preds.len() {
        m[labels[i]][preds[i]] += 1;
    }
    m
}

pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let m = confusion(preds, labels, num_classes);
    let mut total = 0.0;
    for c in 0..num_classes {
        let tp = m[c][c] as f64;
        let predicted: usize = (0..num_classes).map(|t| m[t][c]).sum();
        let actual: usize = m[c].iter().sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        total += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    total / num_classes as f64
}

/// Majority label and its agreement; `None` for all-abstain rows or a tied plurality.
pub fn majority(row: &[Option<usize>], num_classes: usize) -> Option<(usize, f64)> {
    let mut counts = vec![0usize; num_classes];
    for v in row.iter().flatten() {
        counts[*v] += 1;
    }
    let best = *counts.iter().max().unwrap();
    if best == 0 || counts.iter().filter(|&&n| n == best).count() > 1 {
        return None;
    }
    let label = counts.iter().position(|&n| n == best).unwrap();
    Some((label, best as f64 / row.len() as f64))
}
