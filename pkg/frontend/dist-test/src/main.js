// Browser entry point: renders the controller state and forwards keys.
import { HttpApiClient } from "./api.js";
import { KEY_BINDINGS, ReviewController } from "./controller.js";
class ElementPlayer {
    element;
    constructor() {
        this.element = document.createElement("audio");
        this.element.preload = "auto";
    }
    play(url) {
        this.element.src = url;
        return this.element.play().catch((err) => {
            // autoplay restrictions surface here; the keypress satisfies them
            console.warn("playback failed", err);
        });
    }
}
function el(id) {
    const node = document.getElementById(id);
    if (node === null) {
        throw new Error(`missing element #${id}`);
    }
    return node;
}
function render(snapshot) {
    const card = el("card");
    const done = el("done");
    const errorBanner = el("error");
    const hint = el("hint");
    errorBanner.hidden = snapshot.state !== "error";
    if (snapshot.state === "error") {
        errorBanner.textContent = `${snapshot.error ?? "request failed"} — press Enter to retry`;
    }
    hint.textContent = snapshot.hint ?? "";
    if (snapshot.state === "done") {
        card.hidden = true;
        done.hidden = false;
        const progress = snapshot.progress;
        el("done-summary").textContent = progress
            ? `All clips reviewed: ${progress.accepted} accepted, ${progress.rejected} rejected.`
            : "All clips reviewed.";
        return;
    }
    done.hidden = true;
    card.hidden = snapshot.card === null;
    if (snapshot.card !== null) {
        el("entity").textContent = snapshot.card.entity;
        el("carrier").textContent = snapshot.card.carrierText;
        el("language").textContent = snapshot.card.language;
        el("played-state").textContent = snapshot.hasPlayedClip
            ? "clip played — A to accept, R to reject"
            : "press Space to play the clip";
    }
    const progress = snapshot.progress;
    if (progress !== null) {
        const denominator = Math.max(1, progress.total);
        const decided = progress.accepted + progress.rejected;
        el("progress-text").textContent = `${decided}/${progress.total} decided`;
        el("progress-bar").value = decided / denominator;
    }
}
function main() {
    const api = new HttpApiClient("");
    const params = new URLSearchParams(window.location.search);
    const reviewer = params.get("reviewer") ?? "reviewer";
    const controller = new ReviewController(api, new ElementPlayer(), reviewer);
    controller.onChange(render);
    const bindings = el("bindings");
    bindings.textContent = Object.entries(KEY_BINDINGS)
        .map(([key, what]) => `${key === " " ? "Space" : key.toUpperCase()} = ${what}`)
        .join("  ·  ");
    document.addEventListener("keydown", (event) => {
        if (event.repeat) {
            return;
        }
        const key = event.key === "Enter" ? "enter" : event.key;
        if (key === " " || ["f", "a", "r", "enter"].includes(key.toLowerCase())) {
            event.preventDefault();
            void controller.handleKey(key);
        }
    });
    void controller.start();
}
main();
