// Build raw-format base64 payloads for tests (mirrors the service encoding).

export function encodeImageB64(
  width: number,
  height: number,
  channels: number,
  data: number[] | Float32Array,
): string {
  const n = width * height * channels;
  if (data.length !== n) throw new Error("bad test payload length");
  const buf = new ArrayBuffer(16 + 4 * n);
  const view = new DataView(buf);
  const magic = "RFC1";
  for (let i = 0; i < 4; i++) view.setUint8(i, magic.charCodeAt(i));
  view.setUint32(4, width, true);
  view.setUint32(8, height, true);
  view.setUint32(12, channels, true);
  for (let i = 0; i < n; i++) view.setFloat32(16 + 4 * i, Number(data[i]), true);
  const bytes = new Uint8Array(buf);
  let bin = "";
  for (const b of bytes) bin += String.fromCharCode(b);
  return btoa(bin);
}

export function constantImageB64(size: number, channels: number, value: number): string {
  return encodeImageB64(size, size, channels,
    new Float32Array(size * size * channels).fill(value));
}
