// Review session state machine, independent of the DOM so a scripted test
// can drive it exactly the way the keyboard handler does.
//
// Invariants owned here:
//  - a verdict can only be submitted after the clip has been played at
//    least once (must-play-before-decide);
//  - a failed POST is retried for the same card: the decision is never
//    dropped and never duplicated (one successful POST per decision).

import type { ApiClient, Progress, ReviewCard, Verdict } from "./api.js";

export interface AudioPlayer {
  play(url: string): Promise<void>;
}

export type ControllerState = "loading" | "reviewing" | "done" | "error";

export interface ControllerSnapshot {
  state: ControllerState;
  card: ReviewCard | null;
  hasPlayedClip: boolean;
  progress: Progress | null;
  hint: string | null;
  error: string | null;
}

export const KEY_BINDINGS: Record<string, string> = {
  " ": "play the extracted clip",
  f: "play the full carrier audio",
  a: "accept (after playing)",
  r: "reject (after playing)",
};

export class ReviewController {
  private state: ControllerState = "loading";
  private card: ReviewCard | null = null;
  private hasPlayedClip = false;
  private progress: Progress | null = null;
  private hint: string | null = null;
  private error: string | null = null;
  private submitting = false;
  private readonly listeners: Array<(snapshot: ControllerSnapshot) => void> = [];

  constructor(
    private readonly api: ApiClient,
    private readonly player: AudioPlayer,
    private readonly reviewer: string,
  ) {}

  onChange(listener: (snapshot: ControllerSnapshot) => void): void {
    this.listeners.push(listener);
  }

  snapshot(): ControllerSnapshot {
    return {
      state: this.state,
      card: this.card,
      hasPlayedClip: this.hasPlayedClip,
      progress: this.progress,
      hint: this.hint,
      error: this.error,
    };
  }

  private notify(): void {
    const snapshot = this.snapshot();
    for (const listener of this.listeners) {
      listener(snapshot);
    }
  }

  async start(): Promise<void> {
    this.progress = await this.api.fetchProgress().catch(() => null);
    await this.advance();
  }

  private async advance(): Promise<void> {
    this.state = "loading";
    this.hint = null;
    this.notify();
    try {
      const card = await this.api.fetchNext(this.reviewer);
      this.card = card;
      this.hasPlayedClip = false;
      this.error = null;
      this.state = card === null ? "done" : "reviewing";
      if (card === null) {
        this.progress = await this.api.fetchProgress().catch(() => this.progress);
      }
    } catch (err) {
      this.error = String(err);
      this.state = "error";
    }
    this.notify();
  }

  /** Keyboard entry point; every UI action is reachable from here. */
  async handleKey(key: string): Promise<void> {
    if (this.state === "error") {
      if (key === "enter") {
        await this.advance();
      }
      return;
    }
    if (this.state !== "reviewing" || this.card === null) {
      return;
    }
    switch (key.toLowerCase()) {
      case " ":
      case "space":
        await this.playClip();
        break;
      case "f":
        await this.player.play(this.card.fullUrl);
        break;
      case "a":
        await this.decide("ACCEPT");
        break;
      case "r":
        await this.decide("REJECT");
        break;
      default:
        break;
    }
  }

  private async playClip(): Promise<void> {
    if (this.card === null) {
      return;
    }
    await this.player.play(this.card.clipUrl);
    this.hasPlayedClip = true;
    this.hint = null;
    this.notify();
  }

  private async decide(verdict: Verdict): Promise<void> {
    if (this.card === null || this.submitting) {
      return;
    }
    if (!this.hasPlayedClip) {
      this.hint = "Play the clip (space) before deciding.";
      this.notify();
      return;
    }
    this.submitting = true;
    const payload = {
      sampleId: this.card.sampleId,
      verdict,
      reviewer: this.reviewer,
    };
    try {
      // retry the same decision until one POST lands; never skip the card
      let lastError: unknown = null;
      for (let attempt = 0; attempt < 5; attempt += 1) {
        try {
          this.progress = await this.api.submitDecision(payload);
          lastError = null;
          break;
        } catch (err) {
          lastError = err;
        }
      }
      if (lastError !== null) {
        this.error = `Could not submit decision: ${String(lastError)}`;
        this.state = "error";
        this.notify();
        return;
      }
      await this.advance();
    } finally {
      this.submitting = false;
    }
  }
}
