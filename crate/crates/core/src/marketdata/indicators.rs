//! Classical technical indicators over a single price series.
//!
//! Every function returns one value per input timestep and only reads
//! values at or before that timestep.

/// `ln(p_t / p_{t-k})`, zero where the lag is unavailable.
pub fn log_return(close: &[f64], k: usize) -> Vec<f64> {
    (0..close.len()).map(|t| if t >= k { (close[t] / close[t - k]).ln() } else { 0.0 }).collect()
}

/// Exponential moving average with `alpha = 2 / (n + 1)`, seeded with the first value.
pub fn ema(x: &[f64], n: usize) -> Vec<f64> {
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut out = Vec::with_capacity(x.len());
    let mut prev = match x.first() {
        Some(&v) => v,
        None => return out,
    };
    for &v in x {
        prev = alpha * v + (1.0 - alpha) * prev;
        out.push(prev);
    }
    out
}

/// MACD(fast, slow, signal): returns `(line, histogram)` in price units.
pub fn macd(close: &[f64], fast: usize, slow: usize, signal: usize) -> (Vec<f64>, Vec<f64>) {
    let f = ema(close, fast);
    let s = ema(close, slow);
    let line: Vec<f64> = f.iter().zip(&s).map(|(a, b)| a - b).collect();
    let sig = ema(&line, signal);
    let hist = line.iter().zip(&sig).map(|(l, s)| l - s).collect();
    (line, hist)
}

/// KDJ stochastic oscillator K and D lines on a 0..100 scale.
///
/// RSV uses the `window`-bar high/low range; K and D are smoothed with
/// weights `1/k_smooth` and `1/d_smooth`, both starting at 50.
pub fn kdj(high: &[f64], low: &[f64], close: &[f64], window: usize, k_smooth: usize, d_smooth: usize) -> (Vec<f64>, Vec<f64>) {
    let n = close.len();
    let (mut k_line, mut d_line) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut k, mut d) = (50.0, 50.0);
    let (ak, ad) = (1.0 / k_smooth as f64, 1.0 / d_smooth as f64);
    for t in 0..n {
        let from = (t + 1).saturating_sub(window);
        let hh = high[from..=t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ll = low[from..=t].iter().cloned().fold(f64::INFINITY, f64::min);
        let rsv = if hh > ll { 100.0 * (close[t] - ll) / (hh - ll) } else { 50.0 };
        k = (1.0 - ak) * k + ak * rsv;
        d = (1.0 - ad) * d + ad * k;
        k_line.push(k);
        d_line.push(d);
    }
    (k_line, d_line)
}

/// Wilder RSI on a 0..100 scale; 50 until `period` changes have been seen.
pub fn rsi(close: &[f64], period: usize) -> Vec<f64> {
    let n = close.len();
    let mut out = vec![50.0; n];
    if n <= period {
        return out;
    }
    let change = |t: usize| close[t] - close[t - 1];
    let (mut gain, mut loss) = (0.0, 0.0);
    for t in 1..=period {
        let c = change(t);
        gain += c.max(0.0);
        loss += (-c).max(0.0);
    }
    gain /= period as f64;
    loss /= period as f64;
    let value = |g: f64, l: f64| {
        if l == 0.0 {
            if g == 0.0 {
                50.0
            } else {
                100.0
            }
        } else {
            100.0 - 100.0 / (1.0 + g / l)
        }
    };
    out[period] = value(gain, loss);
    for t in period + 1..n {
        let c = change(t);
        gain = (gain * (period as f64 - 1.0) + c.max(0.0)) / period as f64;
        loss = (loss * (period as f64 - 1.0) + (-c).max(0.0)) / period as f64;
        out[t] = value(gain, loss);
    }
    out
}

/// Population standard deviation of the last `window` one-step log returns.
pub fn rolling_volatility(close: &[f64], window: usize) -> Vec<f64> {
    let r = log_return(close, 1);
    (0..close.len())
        .map(|t| {
            if t == 0 {
                return 0.0;
            }
            let from = (t + 1).saturating_sub(window).max(1);
            let s = &r[from..=t];
            let m = s.iter().sum::<f64>() / s.len() as f64;
            (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.len() as f64).sqrt()
        })
        .collect()
}
