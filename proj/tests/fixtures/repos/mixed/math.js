// small helpers
function add(a, b) {
  return a + b;
}

function scale(v, k) {
  const s = add(v, v);
  return s * k;
}
