// Streaming client: latest-wins request coalescing, reconnect with backoff,
// rolling FPS. The socket implementation is injectable so tests can mock it.

import {
  CameraRecord,
  DecodedFrame,
  RenderRequest,
  Telemetry,
  decodeFrame,
} from "./protocol.js";

export interface SocketLike {
  binaryType: string;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  send(data: string): void;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ViewRequest {
  camera: CameraRecord;
  weights: [number, number, number, number];
  res: [number, number];
}

export interface StreamClientOptions {
  socketFactory?: SocketFactory;
  /** reconnect delays in ms; the last entry repeats */
  backoffMs?: number[];
  fpsWindow?: number;
  onFrame?: (frame: DecodedFrame) => void;
  onTelemetry?: (t: Telemetry) => void;
  onStatus?: (connected: boolean) => void;
  onError?: (message: string) => void;
  now?: () => number;
  schedule?: (fn: () => void, ms: number) => void;
}

export class StreamClient {
  private url: string;
  private opts: Required<Pick<StreamClientOptions, "backoffMs" | "fpsWindow">> &
    StreamClientOptions;
  private socket: SocketLike | null = null;
  private connected = false;
  private closed = false;
  private attempt = 0;
  private nextFrameId = 1;
  private inFlight = false;
  private pending: ViewRequest | null = null;
  private frameTimes: number[] = [];
  sentCount = 0;
  lastSent: RenderRequest | null = null;

  constructor(url: string, options: StreamClientOptions = {}) {
    this.url = url;
    this.opts = {
      backoffMs: options.backoffMs ?? [250, 500, 1000, 2000],
      fpsWindow: options.fpsWindow ?? 30,
      ...options,
    };
    this.connect();
  }

  private factory(): SocketFactory {
    if (this.opts.socketFactory) return this.opts.socketFactory;
    return (url) => new WebSocket(url) as unknown as SocketLike;
  }

  private now(): number {
    return this.opts.now ? this.opts.now() : Date.now();
  }

  private connect(): void {
    if (this.closed) return;
    const socket = this.factory()(this.url);
    socket.binaryType = "arraybuffer";
    this.socket = socket;
    socket.onopen = () => {
      this.connected = true;
      this.attempt = 0;
      this.inFlight = false;
      this.opts.onStatus?.(true);
      this.flush();
    };
    socket.onclose = () => this.handleDisconnect();
    socket.onerror = () => this.handleDisconnect();
    socket.onmessage = (ev) => this.handleMessage(ev.data);
  }

  private handleDisconnect(): void {
    if (!this.socket) return;
    this.socket = null;
    const wasConnected = this.connected;
    this.connected = false;
    this.inFlight = false;
    if (wasConnected) this.opts.onStatus?.(false);
    if (this.closed) return;
    const delays = this.opts.backoffMs;
    const delay = delays[Math.min(this.attempt, delays.length - 1)];
    this.attempt += 1;
    const schedule = this.opts.schedule ?? ((fn, ms) => setTimeout(fn, ms));
    schedule(() => this.connect(), delay);
  }

  private handleMessage(data: unknown): void {
    if (typeof data === "string") {
      const msg = JSON.parse(data);
      if (msg.error !== undefined) {
        this.inFlight = false;
        this.opts.onError?.(String(msg.error));
        this.flush();
        return;
      }
      this.opts.onTelemetry?.(msg as Telemetry);
      return;
    }
    const frame = decodeFrame(data as ArrayBuffer);
    this.frameTimes.push(this.now());
    if (this.frameTimes.length > this.opts.fpsWindow) {
      this.frameTimes.shift();
    }
    this.inFlight = false;
    this.opts.onFrame?.(frame);
    this.flush();
  }

  /** Latest-wins: while a request is in flight, newer views replace pending. */
  requestView(view: ViewRequest): void {
    this.pending = view;
    this.flush();
  }

  private flush(): void {
    if (!this.connected || this.inFlight || !this.pending || !this.socket) {
      return;
    }
    const request: RenderRequest = {
      frame_id: this.nextFrameId++,
      camera: this.pending.camera,
      weights: this.pending.weights,
      res: this.pending.res,
    };
    this.pending = null;
    this.inFlight = true;
    this.sentCount += 1;
    this.lastSent = request;
    this.socket.send(JSON.stringify(request));
  }

  fps(): number {
    if (this.frameTimes.length < 2) return 0;
    const span =
      this.frameTimes[this.frameTimes.length - 1] - this.frameTimes[0];
    if (span <= 0) return 0;
    return ((this.frameTimes.length - 1) * 1000) / span;
  }

  isConnected(): boolean {
    return this.connected;
  }

  close(): void {
    this.closed = true;
    this.socket?.close();
  }
}
