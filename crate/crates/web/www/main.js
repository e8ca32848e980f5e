import init, { heatProfile, radiusCurve, toy1d } from "./pkg/heatsmooth_web.js";

const $ = (id) => document.getElementById(id);

// Draws line series sharing one x axis; `points` are drawn as dots.
function plot(canvas, xs, series, { yMin, yMax, points = [] } = {}) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const m = 36;
  const all = series.flatMap((s) => s.ys);
  const lo = yMin ?? Math.min(...all);
  const hi = yMax ?? Math.max(...all);
  const x0 = xs[0], x1 = xs[xs.length - 1];
  const px = (x) => m + ((x - x0) / (x1 - x0)) * (w - 2 * m);
  const py = (y) => h - m - ((y - lo) / (hi - lo || 1)) * (h - 2 * m);

  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#ddd";
  ctx.fillStyle = "#666";
  ctx.font = "11px system-ui";
  for (let i = 0; i <= 4; i++) {
    const y = lo + ((hi - lo) * i) / 4;
    ctx.beginPath(); ctx.moveTo(m, py(y)); ctx.lineTo(w - m, py(y)); ctx.stroke();
    ctx.fillText(y.toFixed(2), 2, py(y) + 4);
    const x = x0 + ((x1 - x0) * i) / 4;
    ctx.fillText(x.toFixed(2), px(x) - 12, h - m + 16);
  }
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    s.ys.forEach((y, i) => (i ? ctx.lineTo(px(xs[i]), py(y)) : ctx.moveTo(px(xs[i]), py(y))));
    ctx.stroke();
  }
  for (const [x, y, color] of points) {
    ctx.fillStyle = color;
    ctx.beginPath(); ctx.arc(px(x), py(y), 3, 0, 2 * Math.PI); ctx.fill();
  }
}

function drawProfile() {
  const sigma = Number($("profile-sigma").value);
  $("profile-sigma-out").textContent = sigma.toFixed(2);
  const p = JSON.parse(heatProfile($("profile-kind").value, sigma));
  plot($("profile-plot"), p.x, [
    { ys: p.raw, color: "#999" },
    { ys: p.smoothed, color: "#c33" },
  ]);
}

function drawRadius() {
  const sigma = Number($("radius-sigma").value);
  $("radius-sigma-out").textContent = sigma.toFixed(2);
  const c = JSON.parse(radiusCurve(sigma));
  plot($("radius-plot"), c.p_top, [
    { ys: c.quantile, color: "#36c" },
    { ys: c.lipschitz, color: "#c33" },
  ], { yMin: 0 });
}

function runToy() {
  const status = $("toy-status");
  status.className = "status";
  status.textContent = "training…";
  // let the status paint before the synchronous run
  setTimeout(() => {
    try {
      const t0 = performance.now();
      const toy = JSON.parse(toy1d(Number($("toy-x").value), Number($("toy-sigma").value), Number($("toy-seed").value)));
      const points = toy.train_x.map((x, i) => [x, toy.train_y[i] ? 1.02 : -0.02, toy.train_y[i] ? "#c33" : "#36c"]);
      plot($("toy-plot"), toy.x, [
        { ys: toy.teacher, color: "#999" },
        { ys: toy.exact, color: "#2a2" },
        { ys: toy.student, color: "#c33" },
      ], { yMin: -0.05, yMax: 1.05, points });
      const last = toy.losses[toy.losses.length - 1];
      status.textContent = `done in ${((performance.now() - t0) / 1000).toFixed(1)} s, final smoothing loss ${last.toExponential(2)}`;
    } catch (e) {
      status.className = "status error";
      status.textContent = String(e.message ?? e);
    }
  }, 20);
}

await init();
$("profile-kind").addEventListener("change", drawProfile);
$("profile-sigma").addEventListener("input", drawProfile);
$("radius-sigma").addEventListener("input", drawRadius);
$("toy-run").addEventListener("click", runToy);
drawProfile();
drawRadius();
runToy();
