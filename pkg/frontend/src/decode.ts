// Decoder for the raw image format: 16-byte header (magic "RFC1",
// u32 width, u32 height, u32 channels, little-endian) + float32 data,
// row-major with channels fastest.

export interface RawImage {
  width: number;
  height: number;
  channels: number;
  data: Float32Array;
}

export class DecodeError extends Error {}

export function decodeBase64Image(b64: string): RawImage {
  let bin: string;
  try {
    bin = atob(b64);
  } catch {
    throw new DecodeError("payload is not valid base64");
  }
  const bytes = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) bytes[i] = bin.charCodeAt(i);
  return decodeImageBytes(bytes);
}

export function decodeImageBytes(bytes: Uint8Array): RawImage {
  if (bytes.length < 16) throw new DecodeError("blob shorter than header");
  const magic = String.fromCharCode(bytes[0]!, bytes[1]!, bytes[2]!, bytes[3]!);
  if (magic !== "RFC1") throw new DecodeError(`bad magic '${magic}'`);
  const view = new DataView(bytes.buffer as ArrayBuffer, bytes.byteOffset,
    bytes.byteLength);
  const width = view.getUint32(4, true);
  const height = view.getUint32(8, true);
  const channels = view.getUint32(12, true);
  const n = width * height * channels;
  if (bytes.length !== 16 + 4 * n) {
    throw new DecodeError(
      `expected ${n} float32 values, got ${(bytes.length - 16) / 4}`,
    );
  }
  const data = new Float32Array(n);
  for (let i = 0; i < n; i++) data[i] = view.getFloat32(16 + 4 * i, true);
  return { width, height, channels, data };
}

/** Extract one channel as a height*width plane. */
export function channelPlane(img: RawImage, channel: number): Float32Array {
  if (channel < 0 || channel >= img.channels) {
    throw new DecodeError(`channel ${channel} out of range`);
  }
  const plane = new Float32Array(img.width * img.height);
  for (let p = 0; p < plane.length; p++) {
    plane[p] = img.data[p * img.channels + channel]!;
  }
  return plane;
}

/** Per-pixel channel mean as a height*width plane. */
export function meanPlane(img: RawImage): Float32Array {
  const plane = new Float32Array(img.width * img.height);
  for (let p = 0; p < plane.length; p++) {
    let s = 0;
    for (let c = 0; c < img.channels; c++) s += img.data[p * img.channels + c]!;
    plane[p] = s / img.channels;
  }
  return plane;
}

/** Element-wise difference a - b of two equally shaped images. */
export function imageDiff(a: RawImage, b: RawImage): RawImage {
  if (a.width !== b.width || a.height !== b.height || a.channels !== b.channels) {
    throw new DecodeError("shape mismatch in diff");
  }
  const data = new Float32Array(a.data.length);
  for (let i = 0; i < data.length; i++) data[i] = a.data[i]! - b.data[i]!;
  return { width: a.width, height: a.height, channels: a.channels, data };
}
